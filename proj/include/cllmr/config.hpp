#pragma once

// Experiment configuration. The file is JSON; absent keys take defaults, an
// empty file means all defaults, and unknown keys, type mismatches and
// constraint violations are reported by dotted key (e.g. "spectrum.rank").

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "inferencer.hpp"
#include "profiles.hpp"
#include "spectrum.hpp"
#include "trainer.hpp"

namespace cllmr::config {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string interactions;  // resolved against the config file's directory
  std::string items;
  std::string reviews;
  std::string kind = "custom";
  double min_rating = 3.0;
  std::uint64_t split_seed = 2024;
};

struct ProfilesConfig {
  std::string provider = "mock";  // mock | http
  std::uint64_t provider_seed = 1;
  std::string embedder = "hash";  // hash | file
  Index embedding_dim = 64;
  std::string user_embeddings;  // CEMB files for the file embedder
  std::string item_embeddings;
  Index max_feedback = 5;
  Index max_user_items = 20;
};

struct SpectrumConfig {
  Index rank = 32;
  double noise_scale = 0.01;
  std::string sign_mode = "aligned";  // aligned | symmetric
  std::string scope = "per_node";     // per_node | global
  std::string source = "raw";         // raw | normalized
};

struct EncoderConfig {
  std::string kind = "sse";  // sse | baseline
  Index hidden = 128;
  double init_observation_noise = 1.0;
};

struct BackboneConfig {
  std::string name = "lightgcn";
  Index dim = 32;
  Index layers = 2;
  double init_scale = 0.1;
};

struct DiagnosticsConfig {
  double collapse_threshold = 0.25;
  bool plots = true;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DataConfig data;
  ProfilesConfig profiles;
  SpectrumConfig spectrum;
  EncoderConfig encoder;
  BackboneConfig backbone;
  trainer::TrainConfig trainer;
  inferencer::InferenceConfig inference;
  DiagnosticsConfig diagnostics;
  std::vector<Index> sweep_ranks{16, 32, 64};
  std::vector<double> sweep_noise{0.001, 0.005, 0.01, 0.05, 0.1};
  fs::path base_dir;  // directory of the config file; not serialized

  fs::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  trainer::ModelConfig model_config() const {
    trainer::ModelConfig m;
    m.dim = backbone.dim;
    m.layers = backbone.layers;
    m.init_scale = backbone.init_scale;
    m.encoder = trainer::parse_encoder_kind(encoder.kind);
    m.hidden = encoder.hidden;
    m.init_observation_noise = encoder.init_observation_noise;
    return m;
  }

  trainer::TrainConfig train_config() const {
    trainer::TrainConfig t = trainer;
    t.seed = seed;
    return t;
  }

  spectrum::ConditionerOptions conditioner_options() const {
    spectrum::ConditionerOptions o;
    o.noise_scale = spectrum.noise_scale;
    o.mode = spectrum.sign_mode == "symmetric" ? spectrum::NoiseMode::symmetric : spectrum::NoiseMode::aligned;
    o.scope = spectrum.scope == "global" ? spectrum::Scope::global : spectrum::Scope::per_node;
    return o;
  }

  spectrum::SvdOptions svd_options() const {
    spectrum::SvdOptions o;
    o.source = spectrum.source == "normalized" ? spectrum::Source::normalized : spectrum::Source::raw;
    return o;
  }
};

namespace detail {

inline std::string type_name(const Json& j) { return j.type_name(); }

// Tracks which keys of one JSON object were consumed.
class Section {
 public:
  Section(const Json* j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (j_ && !j_->is_object()) throw ConfigError(where("") + ": expected an object, got " + type_name(*j_));
  }

  std::string where(const std::string& key) const {
    if (prefix_.empty()) return key.empty() ? "<root>" : key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  const Json* find(const std::string& key) {
    known_.insert(key);
    if (!j_) return nullptr;
    auto it = j_->find(key);
    return it == j_->end() ? nullptr : &*it;
  }

  Section sub(const std::string& key) { return Section(find(key), where(key)); }

  void read(const std::string& key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) mismatch(key, "a number", *v);
      out = v->get<double>();
    }
  }
  void read(const std::string& key, Index& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) mismatch(key, "an integer", *v);
      out = v->get<Index>();
    }
  }
  void read(const std::string& key, int& out) {
    Index tmp = out;
    read(key, tmp);
    out = static_cast<int>(tmp);
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) mismatch(key, "a nonnegative integer", *v);
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) mismatch(key, "a boolean", *v);
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) mismatch(key, "a string", *v);
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<Index>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array()) mismatch(key, "an array of integers", *v);
      std::vector<Index> tmp;
      for (const auto& e : *v) {
        if (!e.is_number_integer()) mismatch(key, "an array of integers", *v);
        tmp.push_back(e.get<Index>());
      }
      out = std::move(tmp);
    }
  }
  void read(const std::string& key, std::vector<double>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array()) mismatch(key, "an array of numbers", *v);
      std::vector<double> tmp;
      for (const auto& e : *v) {
        if (!e.is_number()) mismatch(key, "an array of numbers", *v);
        tmp.push_back(e.get<double>());
      }
      out = std::move(tmp);
    }
  }
  void read_choice(const std::string& key, std::string& out, std::initializer_list<const char*> allowed) {
    read(key, out);
    for (const char* a : allowed)
      if (out == a) return;
    std::string list;
    for (const char* a : allowed) list += std::string(list.empty() ? "" : ", ") + a;
    throw ConfigError(where(key) + ": '" + out + "' is not one of " + list);
  }

  void finish() const {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!known_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
  }

 private:
  const Json* j_;
  std::string prefix_;
  std::set<std::string> known_;

  [[noreturn]] void mismatch(const std::string& key, const char* expected, const Json& got) const {
    throw ConfigError(where(key) + ": expected " + expected + ", got " + type_name(got));
  }
};

inline void check(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key + ": " + what);
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  using detail::check;
  check(c.data.min_rating >= 0, "data.min_rating", "must be >= 0");
  check(c.profiles.embedding_dim >= 1, "profiles.embedding_dim", "must be >= 1");
  check(c.profiles.max_feedback >= 0, "profiles.max_feedback", "must be >= 0");
  check(c.profiles.max_user_items >= 1, "profiles.max_user_items", "must be >= 1");
  if (c.profiles.embedder == "file") {
    check(!c.profiles.user_embeddings.empty(), "profiles.user_embeddings", "required by the file embedder");
    check(!c.profiles.item_embeddings.empty(), "profiles.item_embeddings", "required by the file embedder");
  }
  check(c.spectrum.rank >= 1, "spectrum.rank", "must be >= 1");
  check(c.spectrum.noise_scale >= 0, "spectrum.noise_scale", "must be >= 0");
  check(c.encoder.hidden >= 1, "encoder.hidden", "must be >= 1");
  check(c.encoder.init_observation_noise > 0, "encoder.init_observation_noise", "must be > 0");
  check(c.backbone.dim >= 1, "backbone.dim", "must be >= 1");
  check(c.backbone.layers >= 0, "backbone.layers", "must be >= 0");
  check(c.backbone.init_scale >= 0, "backbone.init_scale", "must be >= 0");
  const auto& t = c.trainer;
  check(t.lr > 0, "trainer.lr", "must be > 0");
  check(t.batch_size >= 1, "trainer.batch_size", "must be >= 1");
  check(t.align_weight >= 0, "trainer.align_weight", "must be >= 0");
  check(t.temperature > 0, "trainer.temperature", "must be > 0");
  check(t.max_epochs >= 1, "trainer.max_epochs", "must be >= 1");
  check(t.patience >= 0, "trainer.patience", "must be >= 0");
  check(t.elbo_weight >= 0, "trainer.elbo_weight", "must be >= 0");
  check(t.elbo_samples >= 1, "trainer.elbo_samples", "must be >= 1");
  check(t.pretrain_epochs >= 0, "trainer.pretrain_epochs", "must be >= 0");
  check(c.inference.alpha >= 0, "inference.alpha", "must be >= 0");
  check(!c.inference.n_list.empty(), "inference.n_list", "must not be empty");
  for (Index n : c.inference.n_list) check(n >= 1, "inference.n_list", "entries must be >= 1");
  check(c.diagnostics.collapse_threshold > 0 && c.diagnostics.collapse_threshold <= 1,
        "diagnostics.collapse_threshold", "must be in (0, 1]");
  check(!c.sweep_ranks.empty(), "sweep.ranks", "must not be empty");
  for (Index r : c.sweep_ranks) check(r >= 1, "sweep.ranks", "entries must be >= 1");
  check(!c.sweep_noise.empty(), "sweep.noise_scales", "must not be empty");
  for (double e : c.sweep_noise) check(e >= 0, "sweep.noise_scales", "entries must be >= 0");
}

inline ExperimentConfig parse_config_text(const std::string& text, const fs::path& base_dir = {}) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  bool blank = true;
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
  if (blank) return c;

  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  detail::Section root(&j, "");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);

  auto data = root.sub("data");
  data.read("interactions", c.data.interactions);
  data.read("items", c.data.items);
  data.read("reviews", c.data.reviews);
  data.read_choice("kind", c.data.kind, {"amazon", "yelp", "steam", "custom"});
  data.read("min_rating", c.data.min_rating);
  data.read("split_seed", c.data.split_seed);
  data.finish();

  auto prof = root.sub("profiles");
  prof.read_choice("provider", c.profiles.provider, {"mock", "http"});
  prof.read("provider_seed", c.profiles.provider_seed);
  prof.read_choice("embedder", c.profiles.embedder, {"hash", "file"});
  prof.read("embedding_dim", c.profiles.embedding_dim);
  prof.read("user_embeddings", c.profiles.user_embeddings);
  prof.read("item_embeddings", c.profiles.item_embeddings);
  prof.read("max_feedback", c.profiles.max_feedback);
  prof.read("max_user_items", c.profiles.max_user_items);
  prof.finish();

  auto spec = root.sub("spectrum");
  spec.read("rank", c.spectrum.rank);
  spec.read("noise_scale", c.spectrum.noise_scale);
  spec.read_choice("sign_mode", c.spectrum.sign_mode, {"aligned", "symmetric"});
  spec.read_choice("scope", c.spectrum.scope, {"per_node", "global"});
  spec.read_choice("source", c.spectrum.source, {"raw", "normalized"});
  spec.finish();

  auto enc = root.sub("encoder");
  enc.read_choice("kind", c.encoder.kind, {"sse", "baseline"});
  enc.read("hidden", c.encoder.hidden);
  enc.read("init_observation_noise", c.encoder.init_observation_noise);
  enc.finish();

  auto bb = root.sub("backbone");
  bb.read_choice("name", c.backbone.name, {"lightgcn"});
  bb.read("dim", c.backbone.dim);
  bb.read("layers", c.backbone.layers);
  bb.read("init_scale", c.backbone.init_scale);
  bb.finish();

  auto tr = root.sub("trainer");
  tr.read("lr", c.trainer.lr);
  tr.read("batch_size", c.trainer.batch_size);
  tr.read("align_weight", c.trainer.align_weight);
  tr.read("temperature", c.trainer.temperature);
  tr.read("max_epochs", c.trainer.max_epochs);
  tr.read("patience", c.trainer.patience);
  std::string align = "cross_pair", elbo = "joint";
  tr.read_choice("align_mode", align, {"cross_pair", "literal"});
  tr.read_choice("elbo_mode", elbo, {"joint", "pretrain"});
  c.trainer.align_mode = align == "literal" ? trainer::AlignMode::literal : trainer::AlignMode::cross_pair;
  c.trainer.elbo_mode = elbo == "pretrain" ? trainer::ElboMode::pretrain : trainer::ElboMode::joint;
  tr.read("elbo_weight", c.trainer.elbo_weight);
  tr.read("elbo_samples", c.trainer.elbo_samples);
  tr.read("pretrain_epochs", c.trainer.pretrain_epochs);
  tr.finish();

  auto inf = root.sub("inference");
  inf.read("alpha", c.inference.alpha);
  inf.read("n_list", c.inference.n_list);
  std::string mode = "counterfactual", debias = "gate";
  inf.read_choice("mode", mode, {"counterfactual", "factual"});
  inf.read_choice("debias_mode", debias, {"gate", "gated"});
  c.inference.mode = mode == "factual" ? inferencer::InferenceMode::factual : inferencer::InferenceMode::counterfactual;
  c.inference.debias = debias == "gated" ? inferencer::DebiasMode::subtract_gated : inferencer::DebiasMode::subtract_gate;
  inf.finish();

  auto diag = root.sub("diagnostics");
  diag.read("collapse_threshold", c.diagnostics.collapse_threshold);
  diag.read("plots", c.diagnostics.plots);
  diag.finish();

  auto sw = root.sub("sweep");
  sw.read("ranks", c.sweep_ranks);
  sw.read("noise_scales", c.sweep_noise);
  sw.finish();

  root.finish();
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.parent_path());
}

// Canonical JSON form; paths are written as given, not resolved.
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"interactions", c.data.interactions}, {"items", c.data.items},       {"reviews", c.data.reviews},
               {"kind", c.data.kind},                 {"min_rating", c.data.min_rating}, {"split_seed", c.data.split_seed}};
  j["profiles"] = {{"provider", c.profiles.provider},
                   {"provider_seed", c.profiles.provider_seed},
                   {"embedder", c.profiles.embedder},
                   {"embedding_dim", c.profiles.embedding_dim},
                   {"user_embeddings", c.profiles.user_embeddings},
                   {"item_embeddings", c.profiles.item_embeddings},
                   {"max_feedback", c.profiles.max_feedback},
                   {"max_user_items", c.profiles.max_user_items}};
  j["spectrum"] = {{"rank", c.spectrum.rank},
                   {"noise_scale", c.spectrum.noise_scale},
                   {"sign_mode", c.spectrum.sign_mode},
                   {"scope", c.spectrum.scope},
                   {"source", c.spectrum.source}};
  j["encoder"] = {{"kind", c.encoder.kind},
                  {"hidden", c.encoder.hidden},
                  {"init_observation_noise", c.encoder.init_observation_noise}};
  j["backbone"] = {{"name", c.backbone.name},
                   {"dim", c.backbone.dim},
                   {"layers", c.backbone.layers},
                   {"init_scale", c.backbone.init_scale}};
  Json t = trainer::to_json(c.trainer);
  t.erase("seed");
  j["trainer"] = t;
  j["inference"] = inferencer::to_json(c.inference);
  j["diagnostics"] = {{"collapse_threshold", c.diagnostics.collapse_threshold}, {"plots", c.diagnostics.plots}};
  j["sweep"] = {{"ranks", c.sweep_ranks}, {"noise_scales", c.sweep_noise}};
  return j;
}

}  // namespace cllmr::config
