#pragma once

// Pipeline stages. Each stage reads its inputs from the output directory,
// writes its artifacts into its own subdirectory and finishes by writing a
// manifest with the stage's config hash; a stage whose manifest matches the
// current config is skipped unless forced.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ablation.hpp"
#include "cemb.hpp"
#include "common.hpp"
#include "config.hpp"
#include "dataio.hpp"
#include "inferencer.hpp"
#include "profiles.hpp"
#include "spectrum.hpp"
#include "trainer.hpp"

namespace cllmr::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using config::ExperimentConfig;

// ---- source data -------------------------------------------------------------

using ItemMeta = std::map<std::string, Json>;                                  // original item id -> metadata
using ReviewMap = std::map<std::pair<std::string, std::string>, std::string>;  // (user, item) -> review

// JSON lines; each object carries its original id under "item" and the
// remaining keys are the item's metadata.
inline ItemMeta load_item_meta(const fs::path& path) {
  ItemMeta out;
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw DependencyError("missing item metadata file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("item") || !j["item"].is_string())
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": expected an object with an \"item\" id");
    const std::string id = j["item"].get<std::string>();
    j.erase("item");
    out[id] = std::move(j);
  }
  return out;
}

inline ReviewMap load_reviews(const fs::path& path) {
  ReviewMap out;
  if (path.empty()) return out;
  std::ifstream in(path);
  if (!in) throw DependencyError("missing review file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("user") || !j.contains("item") || !j.contains("review") ||
        !j["user"].is_string() || !j["item"].is_string() || !j["review"].is_string())
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": expected {\"user\", \"item\", \"review\"}");
    out[{j["user"].get<std::string>(), j["item"].get<std::string>()}] = j["review"].get<std::string>();
  }
  return out;
}

struct Prepared {
  dataio::Splits splits;
  dataio::DatasetStats full_stats;
};

inline Prepared prepare_data(const ExperimentConfig& cfg) {
  if (cfg.data.interactions.empty()) throw ConfigError("data.interactions: no interaction file configured");
  const auto full = dataio::load_interactions(cfg.resolve(cfg.data.interactions), cfg.data.min_rating);
  Prepared p;
  p.full_stats = dataio::stats(full);
  p.splits = dataio::split_dataset(full, {3, 1, 1}, cfg.data.split_seed);
  return p;
}

inline std::string item_title(const Json& meta, const std::string& fallback) {
  for (const char* key : {"title", "name"})
    if (meta.contains(key) && meta[key].is_string()) return meta[key].get<std::string>();
  return fallback;
}

// Item profiles first (metadata plus train-split reviews), then user profiles
// built from the profiles of the items each user interacted with in train.
inline profiles::ProfileStore make_profiles(const dataio::Splits& s, const ItemMeta& meta, const ReviewMap& reviews,
                                            profiles::Dataset kind, const profiles::Provider& provider,
                                            profiles::Transport& transport, Index max_feedback,
                                            Index max_user_items) {
  const auto& ids = *s.train.ids;
  std::vector<std::vector<std::string>> feedback(static_cast<std::size_t>(s.train.n_items));
  std::vector<std::vector<Index>> history(static_cast<std::size_t>(s.train.n_users));
  for (const auto& x : s.train.interactions) {
    history[static_cast<std::size_t>(x.user)].push_back(x.item);
    auto& fb = feedback[static_cast<std::size_t>(x.item)];
    if (static_cast<Index>(fb.size()) >= max_feedback) continue;
    auto it = reviews.find({ids.users.name(x.user), ids.items.name(x.item)});
    if (it != reviews.end()) fb.push_back(it->second);
  }

  profiles::ProfileStore store;
  const Json empty = Json::object();
  for (Index i = 0; i < s.train.n_items; ++i) {
    auto it = meta.find(ids.items.name(i));
    const Json& m = it == meta.end() ? empty : it->second;
    const auto prompt = profiles::build_item_prompt(m, feedback[static_cast<std::size_t>(i)], kind);
    store.insert(profiles::generate_profile(provider, prompt, i, transport));
  }
  for (Index u = 0; u < s.train.n_users; ++u) {
    std::vector<profiles::InteractedItem> items;
    for (Index i : history[static_cast<std::size_t>(u)]) {
      if (static_cast<Index>(items.size()) >= max_user_items) break;
      auto it = meta.find(ids.items.name(i));
      auto rv = reviews.find({ids.users.name(u), ids.items.name(i)});
      items.push_back({item_title(it == meta.end() ? empty : it->second, ids.items.name(i)),
                       store.find(Side::item, i)->summarisation, rv == reviews.end() ? "None" : rv->second});
    }
    // Users without train interactions still need a profile to keep the
    // side table total.
    if (items.empty()) items.push_back({"None", "None", "None"});
    const auto prompt = profiles::build_user_prompt(items, kind);
    store.insert(profiles::generate_profile(provider, prompt, u, transport));
  }
  return store;
}

inline std::unique_ptr<profiles::Provider> make_provider(const ExperimentConfig& cfg) {
  if (cfg.profiles.provider == "http")
    return std::make_unique<profiles::HttpProvider>(profiles::HttpProviderConfig::from_env());
  return std::make_unique<profiles::MockProvider>(cfg.profiles.provider_seed);
}

struct TextTables {
  Matrix users, items;
};

inline TextTables embed_store(const profiles::ProfileStore& store, const ExperimentConfig& cfg, Index n_users,
                              Index n_items, profiles::Transport& transport) {
  TextTables t;
  if (cfg.profiles.embedder == "file") {
    const auto ue = profiles::FileImportEmbedder::from_file(cfg.resolve(cfg.profiles.user_embeddings));
    const auto ie = profiles::FileImportEmbedder::from_file(cfg.resolve(cfg.profiles.item_embeddings));
    t.users = profiles::embed_profiles(store.of_kind(Side::user), ue, Side::user, n_users, transport).vectors;
    t.items = profiles::embed_profiles(store.of_kind(Side::item), ie, Side::item, n_items, transport).vectors;
  } else {
    const profiles::HashEmbedder h(cfg.profiles.embedding_dim, cfg.profiles.provider_seed);
    t.users = profiles::embed_profiles(store.of_kind(Side::user), h, Side::user, n_users, transport).vectors;
    t.items = profiles::embed_profiles(store.of_kind(Side::item), h, Side::item, n_items, transport).vectors;
  }
  return t;
}

inline std::uint64_t conditioner_seed(const ExperimentConfig& cfg) {
  return trainer::derive_seed(cfg.seed, "conditioner");
}

inline std::uint64_t svd_seed(const ExperimentConfig& cfg) { return trainer::derive_seed(cfg.seed, "svd"); }

// Everything the training-type stages need, in memory.
struct Workspace {
  dataio::Splits splits;
  dataio::NormalizedAdjacency adjacency;
  TextTables text;
  spectrum::SpectralFactors factors;

  inferencer::AblationInputs ablation_inputs() const {
    inferencer::AblationInputs in;
    in.splits = &splits;
    in.adjacency = &adjacency;
    in.user_text = text.users;
    in.item_text = text.items;
    in.factors = factors;
    return in;
  }
};

inline inferencer::AblationSettings ablation_settings(const ExperimentConfig& cfg) {
  inferencer::AblationSettings s;
  s.model = cfg.model_config();
  s.train = cfg.train_config();
  s.inference = cfg.inference;
  s.conditioners = cfg.conditioner_options();
  s.conditioner_seed = conditioner_seed(cfg);
  s.collapse_threshold = cfg.diagnostics.collapse_threshold;
  return s;
}

// Runs data preparation, profiling, embedding and the SVD without touching
// the file system beyond reading the configured sources.
inline Workspace build_workspace(const ExperimentConfig& cfg, profiles::Transport& transport) {
  Workspace w;
  const Prepared p = prepare_data(cfg);
  w.splits = p.splits;
  w.adjacency = dataio::build_normalized_adjacency(w.splits.train);
  const auto provider = make_provider(cfg);
  const auto store = make_profiles(w.splits, load_item_meta(cfg.resolve(cfg.data.items)),
                                   load_reviews(cfg.resolve(cfg.data.reviews)), profiles::parse_dataset(cfg.data.kind),
                                   *provider, transport, cfg.profiles.max_feedback, cfg.profiles.max_user_items);
  w.text = embed_store(store, cfg, w.splits.train.n_users, w.splits.train.n_items, transport);
  w.factors = spectrum::truncated_svd(w.splits.train, cfg.spectrum.rank, svd_seed(cfg), cfg.svd_options());
  return w;
}

// ---- stage bookkeeping ---------------------------------------------------------

enum class Stage {
  prepare_data,
  generate_profiles,
  embed_profiles,
  build_spectrum,
  train,
  evaluate,
  ablate,
  diagnose,
  sweep
};

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> v = {Stage::prepare_data,   Stage::generate_profiles, Stage::embed_profiles,
                                       Stage::build_spectrum, Stage::train,             Stage::evaluate,
                                       Stage::ablate,         Stage::diagnose,          Stage::sweep};
  return v;
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::prepare_data: return "prepare-data";
    case Stage::generate_profiles: return "generate-profiles";
    case Stage::embed_profiles: return "embed-profiles";
    case Stage::build_spectrum: return "build-spectrum";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
    case Stage::ablate: return "ablate";
    case Stage::diagnose: return "diagnose";
    case Stage::sweep: return "sweep";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : all_stages())
    if (s == to_string(st)) return st;
  throw ParameterError("unknown subcommand '" + s + "'");
}

inline const char* stage_dir(Stage s) {
  switch (s) {
    case Stage::prepare_data: return "data";
    case Stage::generate_profiles: return "profiles";
    case Stage::embed_profiles: return "embeddings";
    case Stage::build_spectrum: return "spectrum";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
    case Stage::ablate: return "ablate";
    case Stage::diagnose: return "diagnose";
    case Stage::sweep: return "sweep";
  }
  return "?";
}

struct RunOptions {
  fs::path out;
  bool force = false;
  std::optional<std::string> variant;
  std::ostream* log = &std::cout;
};

inline std::string hash_json(const Json& j) { return hex64(fnv1a(j.dump())); }

// Config fingerprint of a stage: its own config slice plus the fingerprints
// of every stage it reads from.
inline std::string stage_hash(Stage s, const ExperimentConfig& cfg, const std::string& extra = {}) {
  const Json c = config::to_json(cfg);
  Json j;
  j["stage"] = to_string(s);
  switch (s) {
    case Stage::prepare_data:
      j["data"] = c["data"];
      break;
    case Stage::generate_profiles:
      j["up"] = stage_hash(Stage::prepare_data, cfg);
      j["profiles"] = {{"provider", cfg.profiles.provider},
                       {"provider_seed", cfg.profiles.provider_seed},
                       {"max_feedback", cfg.profiles.max_feedback},
                       {"max_user_items", cfg.profiles.max_user_items}};
      break;
    case Stage::embed_profiles:
      j["up"] = stage_hash(Stage::generate_profiles, cfg);
      j["profiles"] = c["profiles"];
      break;
    case Stage::build_spectrum:
      j["up"] = stage_hash(Stage::prepare_data, cfg);
      j["spectrum"] = c["spectrum"];
      j["seed"] = cfg.seed;
      break;
    case Stage::train:
      j["up"] = {stage_hash(Stage::embed_profiles, cfg), stage_hash(Stage::build_spectrum, cfg)};
      j["encoder"] = c["encoder"];
      j["backbone"] = c["backbone"];
      j["trainer"] = c["trainer"];
      j["seed"] = cfg.seed;
      break;
    case Stage::evaluate:
      j["up"] = stage_hash(Stage::train, cfg);
      j["inference"] = c["inference"];
      break;
    case Stage::ablate:
    case Stage::sweep:
      j["up"] = {stage_hash(Stage::embed_profiles, cfg), stage_hash(Stage::build_spectrum, cfg)};
      j["encoder"] = c["encoder"];
      j["backbone"] = c["backbone"];
      j["trainer"] = c["trainer"];
      j["inference"] = c["inference"];
      j["diagnostics"] = c["diagnostics"];
      if (s == Stage::sweep) j["sweep"] = c["sweep"];
      j["seed"] = cfg.seed;
      break;
    case Stage::diagnose:
      j["up"] = stage_hash(Stage::train, cfg);
      j["diagnostics"] = c["diagnostics"];
      break;
  }
  if (!extra.empty()) j["extra"] = extra;
  return hash_json(j);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::optional<Json> read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) return std::nullopt;
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) return std::nullopt;
  return j;
}

inline Json make_manifest(Stage s, const std::string& hash, const ExperimentConfig& cfg) {
  return {{"stage", to_string(s)},
          {"config_hash", hash},
          {"seeds", {{"seed", cfg.seed}, {"split_seed", cfg.data.split_seed}, {"provider_seed", cfg.profiles.provider_seed}}}};
}

// Throws unless the upstream stage has completed for the current config.
inline void require_stage(Stage needed, Stage by, const fs::path& out, const ExperimentConfig& cfg) {
  const auto m = read_manifest(out / stage_dir(needed));
  if (!m)
    throw DependencyError(std::string(to_string(by)) + " needs the output of '" + to_string(needed) + "'; run `cllmr " +
                          to_string(needed) + "` first");
  if (m->value("config_hash", std::string()) != stage_hash(needed, cfg))
    throw DependencyError(std::string(to_string(by)) + ": the '" + to_string(needed) +
                          "' output is stale for this config; rerun `cllmr " + to_string(needed) + "`");
}

// Exclusive per-output-directory lock held for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& out) : path_(out / ".cllmr.lock") {
    fs::create_directories(out);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw Error("output directory " + out.string() + " is locked by another stage (remove " + path_.string() +
                  " if no stage is running)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

// ---- artifact readers ---------------------------------------------------------

inline dataio::Splits read_splits(const fs::path& out) { return dataio::load_split_dir(out / stage_dir(Stage::prepare_data)); }

inline TextTables read_text(const fs::path& out, Index n_users, Index n_items) {
  const fs::path d = out / stage_dir(Stage::embed_profiles);
  return {cemb::read_dense(d / "users.cemb", n_users), cemb::read_dense(d / "items.cemb", n_items)};
}

inline spectrum::SpectralFactors read_factors(const fs::path& out, Index n_users, Index n_items) {
  const fs::path d = out / stage_dir(Stage::build_spectrum);
  spectrum::SpectralFactors f;
  f.left = cemb::read_dense(d / "left.cemb", n_users);
  f.right = cemb::read_dense(d / "right.cemb", n_items);
  const Matrix s = cemb::read_dense(d / "singular_values.cemb", f.left.cols());
  f.singular_values = s.col(0);
  f.rank = f.left.cols();
  return f;
}

inline Workspace read_workspace(const fs::path& out) {
  Workspace w;
  w.splits = read_splits(out);
  w.adjacency = dataio::build_normalized_adjacency(w.splits.train);
  w.text = read_text(out, w.splits.train.n_users, w.splits.train.n_items);
  w.factors = read_factors(out, w.splits.train.n_users, w.splits.train.n_items);
  return w;
}

// ---- plots ----------------------------------------------------------------------

// Line chart of singular values normalized by the largest one.
inline std::string spectrum_svg(const std::string& title, const Vector& values) {
  const double w = 480, h = 300, left = 50, right = 20, top = 36, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << ' ' << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 8
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">singular value index</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 14 " << top + ph / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">normalized value</text>\n";
  const double top_value = values.size() ? values(0) : 0.0;
  const double n = static_cast<double>(std::max<Eigen::Index>(values.size() - 1, 1));
  os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    const double y = top_value > 0 ? values(k) / top_value : 0.0;
    os << (k ? " " : "") << left + pw * static_cast<double>(k) / n << ',' << top + ph * (1.0 - y);
  }
  os << "\"/>\n</svg>\n";
  return os.str();
}

// ---- stages -----------------------------------------------------------------------

namespace detail {

inline void write_report_files(const fs::path& dir, const std::string& stem, const inferencer::RankingReport& r) {
  write_json(dir / (stem + ".json"), Json(inferencer::to_json(r)));
}

inline void write_spectrum_files(const fs::path& dir, const std::string& stem, const inferencer::SpectrumDiagnostics& d,
                                 bool plot, const std::string& title) {
  write_json(dir / (stem + ".json"), Json(inferencer::to_json(d)));
  write_text(dir / (stem + ".csv"), inferencer::spectrum_csv(d));
  if (plot) write_text(dir / (stem + ".svg"), spectrum_svg(title, d.singular_values));
}

// Mean scores over every user-item pair: the factual total effect, the
// counterfactual score that is kept, and the direct effect removed between
// them.
inline Json effect_summary(const Matrix& fu, const Matrix& fi, const Matrix& cu, const Matrix& ci) {
  const double total = fu.colwise().mean().dot(fi.colwise().mean());
  const double retained = cu.colwise().mean().dot(ci.colwise().mean());
  return {{"total_effect", total}, {"removed_direct_effect", total - retained}, {"retained_effect", retained}};
}

inline void stage_prepare(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  const Prepared p = prepare_data(cfg);
  dataio::write_split_dir(dir, p.splits, p.full_stats);
  log << "prepared " << p.full_stats.n_users << " users, " << p.full_stats.n_items << " items, "
      << p.full_stats.n_interactions << " interactions (train " << p.splits.train.size() << ", val "
      << p.splits.val.size() << ", test " << p.splits.test.size() << ")\n";
}

inline void stage_profiles(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir,
                           profiles::Transport& transport, std::ostream& log) {
  const auto splits = read_splits(out);
  const auto provider = make_provider(cfg);
  const auto store = make_profiles(splits, load_item_meta(cfg.resolve(cfg.data.items)),
                                   load_reviews(cfg.resolve(cfg.data.reviews)), profiles::parse_dataset(cfg.data.kind),
                                   *provider, transport, cfg.profiles.max_feedback, cfg.profiles.max_user_items);
  store.write_jsonl(dir / "profiles.jsonl");
  log << "generated " << store.size() << " profiles with the " << provider->name() << " provider\n";
}

inline void stage_embed(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir,
                        profiles::Transport& transport, std::ostream& log) {
  const auto splits = read_splits(out);
  const auto store = profiles::ProfileStore::read_jsonl(out / stage_dir(Stage::generate_profiles) / "profiles.jsonl");
  const auto t = embed_store(store, cfg, splits.train.n_users, splits.train.n_items, transport);
  cemb::write_dense(dir / "users.cemb", t.users);
  cemb::write_dense(dir / "items.cemb", t.items);
  log << "embedded " << t.users.rows() << " user and " << t.items.rows() << " item profiles (dim " << t.users.cols()
      << ")\n";
}

inline void stage_spectrum(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir, std::ostream& log) {
  const auto splits = read_splits(out);
  const auto f = spectrum::truncated_svd(splits.train, cfg.spectrum.rank, svd_seed(cfg), cfg.svd_options());
  cemb::write_dense(dir / "left.cemb", f.left, cemb::Precision::f64);
  cemb::write_dense(dir / "right.cemb", f.right, cemb::Precision::f64);
  cemb::write_dense(dir / "singular_values.cemb", Matrix(f.singular_values), cemb::Precision::f64);
  const auto [cu, ci] = spectrum::build_conditioners(f, cfg.conditioner_options(), conditioner_seed(cfg));
  cemb::write_dense(dir / "conditioners_users.cemb", cu.noisy);
  cemb::write_dense(dir / "conditioners_items.cemb", ci.noisy);
  inferencer::SpectrumDiagnostics d;
  d.singular_values = f.singular_values;
  write_text(dir / "singular_values.csv", inferencer::spectrum_csv(d));
  log << "rank-" << f.rank << " spectrum, leading singular value " << f.singular_values(0) << "\n";
}

inline void stage_train(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir, std::ostream& log) {
  const Workspace w = read_workspace(out);
  const auto data = inferencer::training_data(inferencer::Variant::full, w.ablation_inputs(), ablation_settings(cfg));
  std::ofstream train_log(dir / "train_log.jsonl");
  const auto t0 = std::chrono::steady_clock::now();
  const auto st = trainer::fit(data, cfg.model_config(), cfg.train_config(), &train_log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  trainer::save_checkpoint(st, dir / "checkpoint");
  write_json(dir / "timing.json", {{"train_seconds", secs}});
  log << "trained " << st.epochs_run << " epochs; best epoch " << st.best_epoch << ", val Recall@10 "
      << st.best_val_recall << " (untrained " << st.initial_val_recall << ")\n";
}

inline void stage_evaluate(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir, std::ostream& log) {
  const auto splits = read_splits(out);
  const auto st = trainer::load_checkpoint(out / stage_dir(Stage::train) / "checkpoint");
  Json timing = Json::object();
  auto run = [&](const inferencer::InferenceConfig& ic, const std::string& stem) {
    const auto rep = trainer::evaluate_test(st, splits, ic);
    Json j = inferencer::to_json(rep);
    inferencer::InferenceConfig fact = ic;
    fact.mode = inferencer::InferenceMode::factual;
    const auto [fu, fi] = trainer::scoring_tables(st, fact);
    const auto [cu, ci] = trainer::scoring_tables(st, ic);
    j["effects"] = effect_summary(fu, fi, cu, ci);
    write_json(dir / (stem + ".json"), j);
    timing[stem] = rep.runtime_seconds;
    return rep;
  };
  const auto main_report = run(cfg.inference, "report");
  for (double a : {0.0, 0.25, 0.5, 1.0}) {
    auto ic = cfg.inference;
    ic.alpha = a;
    char stem[32];
    std::snprintf(stem, sizeof stem, "report_alpha_%g", a);
    run(ic, stem);
  }
  write_json(dir / "timing.json", timing);
  log << "test";
  for (const auto& [n, v] : main_report.recall) log << " Recall@" << n << "=" << v;
  for (const auto& [n, v] : main_report.ndcg) log << " NDCG@" << n << "=" << v;
  log << " (alpha " << cfg.inference.alpha << ")\n";
}

inline Json variant_summary(const inferencer::AblationResult& r) {
  Json j = inferencer::to_json(r.report);
  Json out;
  out["variant"] = to_string(r.variant);
  out["recall"] = j["recall"];
  out["ndcg"] = j["ndcg"];
  out["losses"] = inferencer::active_losses(r.state);
  out["side_effective_rank"] = r.side_spectrum ? Json(r.side_spectrum->effective_rank) : Json(nullptr);
  out["collab_effective_rank"] = r.collab_spectrum.effective_rank;
  out["best_epoch"] = r.state.best_epoch;
  return out;
}

inline void stage_ablate_variant(const ExperimentConfig& cfg, const Workspace& w, inferencer::Variant v,
                                 const fs::path& dir, std::ostream& log) {
  fs::create_directories(dir);
  std::ofstream train_log(dir / "train_log.jsonl");
  const auto r = inferencer::run_ablation(v, w.ablation_inputs(), ablation_settings(cfg), &train_log);
  write_report_files(dir, "report", r.report);
  write_json(dir / "summary.json", variant_summary(r));
  if (r.side_spectrum)
    write_spectrum_files(dir, "side_spectrum", *r.side_spectrum, cfg.diagnostics.plots,
                         std::string("side representations: ") + to_string(v));
  write_spectrum_files(dir, "collab_spectrum", r.collab_spectrum, cfg.diagnostics.plots,
                       std::string("collaborative representations: ") + to_string(v));
  log << to_string(v) << ": test Recall@10 " << (r.report.recall.count(10) ? r.report.recall.at(10) : -1.0);
  if (r.side_spectrum) log << ", side effective rank " << r.side_spectrum->effective_rank;
  log << "\n";
}

inline void stage_diagnose(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir, std::ostream& log) {
  const auto st = trainer::load_checkpoint(out / stage_dir(Stage::train) / "checkpoint");
  const double th = cfg.diagnostics.collapse_threshold;
  Json summary = Json::object();
  if (st.encoder) {
    const auto d = inferencer::singular_spectrum(st.tables.side, th);
    write_spectrum_files(dir, "side_spectrum", d, cfg.diagnostics.plots, "side representations");
    summary["side_effective_rank"] = d.effective_rank;
    summary["side_collapsed"] = d.collapsed;
  }
  const auto c = inferencer::singular_spectrum(st.tables.collab, th);
  write_spectrum_files(dir, "collab_spectrum", c, cfg.diagnostics.plots, "collaborative representations");
  summary["collab_effective_rank"] = c.effective_rank;
  summary["collab_collapsed"] = c.collapsed;
  write_json(dir / "summary.json", summary);
  log << "effective rank: side " << summary.value("side_effective_rank", 0.0) << ", collaborative " << c.effective_rank
      << "\n";
}

inline std::string noise_stem(double eps) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "noise_%g", eps);
  return buf;
}

inline void stage_sweep(const ExperimentConfig& cfg, const fs::path& out, const fs::path& dir, std::ostream& log) {
  Workspace w = read_workspace(out);
  auto one = [&](const ExperimentConfig& c, const spectrum::SpectralFactors& f, const std::string& stem) {
    auto in = w.ablation_inputs();
    in.factors = f;
    const auto r = inferencer::run_ablation(inferencer::Variant::full, in, ablation_settings(c));
    Json j = inferencer::to_json(r.report);
    j["rank"] = f.rank;
    j["noise_scale"] = c.spectrum.noise_scale;
    j["side_effective_rank"] = r.side_spectrum ? Json(r.side_spectrum->effective_rank) : Json(nullptr);
    write_json(dir / (stem + ".json"), j);
    log << stem << ": test Recall@10 " << (r.report.recall.count(10) ? r.report.recall.at(10) : -1.0) << "\n";
  };
  for (Index k : cfg.sweep_ranks) {
    ExperimentConfig c = cfg;
    c.spectrum.rank = k;
    const auto f = spectrum::truncated_svd(w.splits.train, k, svd_seed(c), c.svd_options());
    one(c, f, "rank_" + std::to_string(k));
  }
  for (double eps : cfg.sweep_noise) {
    ExperimentConfig c = cfg;
    c.spectrum.noise_scale = eps;
    one(c, w.factors, noise_stem(eps));
  }
}

}  // namespace detail

// Runs one stage. Returns false when the stage was skipped as up to date.
inline bool run_stage(Stage stage, const ExperimentConfig& cfg, const RunOptions& opt,
                      profiles::Transport& transport) {
  std::ostream& log = opt.log ? *opt.log : std::cout;
  const fs::path out = opt.out.empty() ? cfg.resolve(cfg.output_dir) : opt.out;
  DirectoryLock lock(out);

  switch (stage) {
    case Stage::prepare_data: break;
    case Stage::generate_profiles:
    case Stage::build_spectrum: require_stage(Stage::prepare_data, stage, out, cfg); break;
    case Stage::embed_profiles: require_stage(Stage::generate_profiles, stage, out, cfg); break;
    case Stage::train:
    case Stage::ablate:
    case Stage::sweep:
      require_stage(Stage::prepare_data, stage, out, cfg);
      require_stage(Stage::embed_profiles, stage, out, cfg);
      require_stage(Stage::build_spectrum, stage, out, cfg);
      break;
    case Stage::evaluate:
    case Stage::diagnose: require_stage(Stage::train, stage, out, cfg); break;
  }

  if (stage == Stage::ablate) {
    std::vector<inferencer::Variant> variants;
    if (opt.variant && *opt.variant != "all")
      variants.push_back(inferencer::parse_variant(*opt.variant));
    else
      variants = inferencer::all_variants();
    const fs::path root = out / stage_dir(stage);
    std::optional<Workspace> w;
    bool ran = false;
    for (auto v : variants) {
      const fs::path dir = root / to_string(v);
      const std::string hash = stage_hash(stage, cfg, to_string(v));
      const auto m = read_manifest(dir);
      if (!opt.force && m && m->value("config_hash", std::string()) == hash) {
        log << "ablate/" << to_string(v) << " is up to date; skipping\n";
        continue;
      }
      if (!w) w = read_workspace(out);
      detail::stage_ablate_variant(cfg, *w, v, dir, log);
      Json man = make_manifest(stage, hash, cfg);
      man["variant"] = to_string(v);
      write_json(dir / "manifest.json", man);
      ran = true;
    }
    return ran;
  }

  const fs::path dir = out / stage_dir(stage);
  const std::string hash = stage_hash(stage, cfg);
  const auto m = read_manifest(dir);
  if (!opt.force && m && m->value("config_hash", std::string()) == hash) {
    log << to_string(stage) << " is up to date; skipping (use --force to rerun)\n";
    return false;
  }
  fs::create_directories(dir);
  fs::remove(dir / "manifest.json");
  switch (stage) {
    case Stage::prepare_data: detail::stage_prepare(cfg, dir, log); break;
    case Stage::generate_profiles: detail::stage_profiles(cfg, out, dir, transport, log); break;
    case Stage::embed_profiles: detail::stage_embed(cfg, out, dir, transport, log); break;
    case Stage::build_spectrum: detail::stage_spectrum(cfg, out, dir, log); break;
    case Stage::train: detail::stage_train(cfg, out, dir, log); break;
    case Stage::evaluate: detail::stage_evaluate(cfg, out, dir, log); break;
    case Stage::diagnose: detail::stage_diagnose(cfg, out, dir, log); break;
    case Stage::sweep: detail::stage_sweep(cfg, out, dir, log); break;
    case Stage::ablate: break;
  }
  write_json(dir / "manifest.json", make_manifest(stage, hash, cfg));
  return true;
}

}  // namespace cllmr::pipeline
