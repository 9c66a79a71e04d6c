#pragma once

// Side-information construction: prompt rendering for item and user profiles,
// profile providers (deterministic mock, HTTP), and text-embedding intake.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cemb.hpp"
#include "common.hpp"

namespace cllmr::profiles {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum class Dataset { amazon, yelp, steam, custom };

inline Dataset parse_dataset(const std::string& s) {
  if (s == "amazon") return Dataset::amazon;
  if (s == "yelp") return Dataset::yelp;
  if (s == "steam") return Dataset::steam;
  if (s == "custom") return Dataset::custom;
  throw ParameterError("unknown dataset kind '" + s + "'");
}

inline const char* to_string(Dataset d) {
  switch (d) {
    case Dataset::amazon: return "amazon";
    case Dataset::yelp: return "yelp";
    case Dataset::steam: return "steam";
    case Dataset::custom: return "custom";
  }
  return "?";
}

struct PromptText {
  Side kind = Side::item;
  Dataset dataset = Dataset::custom;
  std::string body;
};

struct ProfileText {
  Index node_id = 0;
  Side kind = Side::item;
  std::string summarisation;
  std::string reasoning;

  std::string combined() const { return summarisation + " " + reasoning; }
};

inline std::size_t word_count(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

inline std::size_t word_count(const ProfileText& p) {
  return word_count(p.summarisation) + word_count(p.reasoning);
}

// ---- templates -------------------------------------------------------------

namespace templates {

inline constexpr const char* kSummarise = "You will serve as an assistant to help me summarise ";
inline constexpr const char* kDetermine = "You will serve as an assistant to help me determine ";
inline constexpr const char* kAnswerFormat =
    "Please answer in JSON format with two fields, \"summarisation\" and \"reasoning\", "
    "using no more than 200 words in total.";

struct ItemTemplate {
  std::string instruction;
  std::vector<std::string> required;
  std::vector<std::string> optional;  // rendered as "None" when absent
  bool has_feedback = false;
};

inline ItemTemplate item_template(Dataset d) {
  switch (d) {
    case Dataset::amazon:
      return {std::string(kSummarise) +
                  "which types of users would enjoy a specific book. I will provide you with the title and a "
                  "description of the book. Here are the instructions:\n"
                  "1. I will provide you with information in the form of a JSON string that describes the book:\n"
                  "{\"title\": \"the title of the book\", \"description\": \"a description of the book\"}",
              {"title", "description"},
              {},
              false};
    case Dataset::yelp:
      return {std::string(kSummarise) +
                  "which types of users would enjoy a specific video game.\n"
                  "I will provide you with the basic information (name, publisher, genres and tags) of that game "
                  "and also some feedback of users for it.\n"
                  "Here are the instructions:\n"
                  "1. The basic information will be described in JSON format, with the following attributes:\n"
                  "{\n"
                  "    \"name\": \"the name of the video game\",\n"
                  "    \"publisher\": \"the publisher of the game\",\n"
                  "    \"genres\": \"the genres of the game\",\n"
                  "    \"tags\": \"several tags describing the game\"\n"
                  "}\n"
                  "2. Feedback from users will be managed in the following List format: "
                  "[\"the first feedback\", \"the second feedback\", ....]\n"
                  "3. The information I will give you: a JSON string describing the basic information about the "
                  "game; a List object containing some feedback from users about the game.",
              {"name", "publisher", "genres", "tags"},
              {},
              true};
    case Dataset::steam:
      return {std::string(kSummarise) +
                  "which types of users would enjoy a specific business.\n"
                  "I will provide you with the basic information (name, city and category) of that business and "
                  "also some feedback of users for it.\n"
                  "Here are the instructions:\n"
                  "1. The basic information will be described in JSON format, with the following attributes:\n"
                  "{\n"
                  "    \"name\": \"the name of the business\",\n"
                  "    \"city\": \"city where the company is located\", (if there is no city, I will set this "
                  "value to \"None\")\n"
                  "    \"categories\": \"several tags describing the business\" (if there is no categories, I "
                  "will set this value to \"None\")\n"
                  "}\n"
                  "2. Feedback from users will be managed in the following List format:\n"
                  "[\n"
                  "    \"the first feedback\",\n"
                  "    \"the second feedback\",\n"
                  "    ....\n"
                  "]\n"
                  "3. The information I will give you: a JSON string describing the basic information about the "
                  "business. a list object containing some feedback from users about the business.",
              {"name"},
              {"city", "categories"},
              true};
    case Dataset::custom:
      return {std::string(kSummarise) +
                  "which types of users would enjoy a specific item.\n"
                  "I will provide you with the basic information of that item and also some feedback of users "
                  "for it.\n"
                  "Here are the instructions:\n"
                  "1. The basic information will be described in JSON format.\n"
                  "2. Feedback from users will be managed in the following List format: "
                  "[\"the first feedback\", \"the second feedback\", ....]\n"
                  "3. The information I will give you: a JSON string describing the basic information about the "
                  "item; a List object containing some feedback from users about the item.",
              {},
              {},
              true};
  }
  return {};
}

inline std::string user_instruction(Dataset d) {
  switch (d) {
    case Dataset::amazon:
      return std::string(kDetermine) +
             "which types of books a specific user is likely to enjoy.\n"
             "I will provide you with information about books that the user has purchased, as well as his or "
             "her reviews of those books. Here are the instructions:\n"
             "1. Each purchased book will be described in JSON format, with the following attributes:\n"
             "{\"title\": \"the title of the book\", \"description\": \"a description of what types of users "
             "will like this book\", \"review\": \"the user's review on the book\"}\n"
             "2. The information I will give you: a list of JSON strings describing the items that the user has "
             "purchased.";
    case Dataset::yelp:
      return std::string(kDetermine) +
             "which types of game a specific user is likely to enjoy.\n"
             "I will provide you with information about games that the user has interacted, as well as his or "
             "her reviews of those games. Here are the instructions:\n"
             "1. Each interacted game will be described in JSON format, with the following attributes:\n"
             "{\"title\": \"the name/title of the game\", \"description\": \"a description of what types of "
             "users will like this game\", \"review\": \"the user's review on the game\"}\n"
             "2. The information I will give you: a list of JSON strings describing the games that the user has "
             "played.";
    case Dataset::steam:
      return std::string(kDetermine) +
             "which types of business a specific user is likely to enjoy.\n"
             "I will provide you with information about businesses that the user has interacted, as well as "
             "his or her reviews of those businesses.\n"
             "Here are the instructions:\n"
             "1. Each interacted business will be described in JSON format, with the following attributes:\n"
             "{\n"
             "    \"title\": \"the name of the business\",\n"
             "    \"description\": \"a description of what types of users will like this business\",\n"
             "    \"review\": \"the user's review on the business\"\n"
             "}\n"
             "2. The information I will give you: a list of JSON strings describing the businesses that the user "
             "has interacted.";
    case Dataset::custom:
      return std::string(kDetermine) +
             "which types of items a specific user is likely to enjoy.\n"
             "I will provide you with information about items that the user has interacted, as well as his or "
             "her reviews of those items. Here are the instructions:\n"
             "1. Each interacted item will be described in JSON format, with the following attributes:\n"
             "{\"title\": \"the title of the item\", \"description\": \"a description of what types of users "
             "will like this item\", \"review\": \"the user's review on the item\"}\n"
             "2. The information I will give you: a list of JSON strings describing the items that the user has "
             "interacted.";
  }
  return {};
}

}  // namespace templates

inline std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Every word that occurs in any template's fixed text.
inline const std::set<std::string>& template_vocabulary() {
  static const std::set<std::string> vocab = [] {
    std::set<std::string> v;
    for (Dataset d : {Dataset::amazon, Dataset::yelp, Dataset::steam, Dataset::custom}) {
      for (auto& w : tokenize_words(templates::item_template(d).instruction)) v.insert(w);
      for (auto& w : tokenize_words(templates::user_instruction(d))) v.insert(w);
    }
    for (auto& w : tokenize_words(templates::kAnswerFormat)) v.insert(w);
    for (const char* w : {"none", "title", "description", "review"}) v.insert(w);
    return v;
  }();
  return vocab;
}

// Item metadata: a JSON object keyed by attribute name.
inline PromptText build_item_prompt(const Json& meta, const std::vector<std::string>& feedback, Dataset dataset) {
  if (!meta.is_object()) throw TemplateError("item metadata must be a JSON object");
  const auto tpl = templates::item_template(dataset);
  Json payload = Json::object();
  if (dataset == Dataset::custom) {
    for (auto it = meta.begin(); it != meta.end(); ++it) payload[it.key()] = it.value();
  } else {
    for (const auto& key : tpl.required) {
      if (!meta.contains(key) || meta.at(key).is_null())
        throw TemplateError(std::string("item metadata for ") + to_string(dataset) + " lacks required key '" + key +
                            "'");
      payload[key] = meta.at(key);
    }
    for (const auto& key : tpl.optional) {
      payload[key] = (meta.contains(key) && !meta.at(key).is_null()) ? meta.at(key) : Json("None");
    }
  }
  std::string body = tpl.instruction + "\n\n" + payload.dump(4);
  if (tpl.has_feedback) body += "\n" + Json(feedback).dump(4);
  body += "\n\n";
  body += templates::kAnswerFormat;
  return {Side::item, dataset, std::move(body)};
}

struct InteractedItem {
  std::string title;
  std::string description;
  std::string review;
};

inline PromptText build_user_prompt(const std::vector<InteractedItem>& items, Dataset dataset) {
  if (items.empty()) throw PromptError("user prompt needs at least one interacted item");
  Json list = Json::array();
  for (const auto& it : items) {
    Json obj = Json::object();
    obj["title"] = it.title;
    obj["description"] = it.description;
    obj["review"] = it.review;
    list.push_back(std::move(obj));
  }
  std::string body = templates::user_instruction(dataset) + "\n\n" + list.dump(4) + "\n\n" + templates::kAnswerFormat;
  return {Side::user, dataset, std::move(body)};
}

// ---- providers ---------------------------------------------------------------

struct HttpResponse {
  int status = 0;
  std::string body;
};

// Network seam. Providers that talk to a remote model go through this; tests
// inject fakes.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& url, const std::vector<std::pair<std::string, std::string>>& headers,
                            const std::string& body, double timeout_s) = 0;
};

class NoNetworkTransport final : public Transport {
 public:
  HttpResponse post(const std::string& url, const std::vector<std::pair<std::string, std::string>>&,
                    const std::string&, double) override {
    throw ProviderError("network access is disabled (attempted POST to " + url + ")");
  }
};

class Provider {
 public:
  virtual ~Provider() = default;
  // Returns summarisation and reasoning; node_id and kind are filled by the caller.
  virtual ProfileText generate(const PromptText& prompt, Transport& transport) const = 0;
  virtual std::string name() const = 0;
};

// Pure function of (prompt body, seed). Content words of the prompt (anything
// outside the template vocabulary) are resampled into the two parts, so
// prompts about similar items yield similar profiles.
class MockProvider final : public Provider {
 public:
  explicit MockProvider(std::uint64_t seed = 1) : seed_(seed) {}

  ProfileText generate(const PromptText& prompt, Transport&) const override {
    const auto& stop = template_vocabulary();
    std::vector<std::string> content;
    for (auto& w : tokenize_words(prompt.body))
      if (!stop.count(w)) content.push_back(std::move(w));
    if (content.empty()) content = {"general", "audience", "broad", "appeal"};
    Rng rng(fnv1a(prompt.body, 0xcbf29ce484222325ULL ^ (seed_ * 0x9e3779b97f4a7c15ULL)));
    std::uniform_int_distribution<std::size_t> pick(0, content.size() - 1);
    auto sample = [&](std::size_t n) {
      std::string out;
      for (std::size_t k = 0; k < n; ++k) {
        if (k) out += ' ';
        out += content[pick(rng)];
      }
      return out;
    };
    ProfileText p;
    p.kind = prompt.kind;
    p.summarisation = sample(kSummaryWords);
    p.reasoning = sample(kReasoningWords);
    return p;
  }

  std::string name() const override { return "mock"; }

  static constexpr std::size_t kSummaryWords = 48;
  static constexpr std::size_t kReasoningWords = 32;

 private:
  std::uint64_t seed_;
};

// Splits a model reply into the two profile parts. Accepts a JSON object with
// "summarisation"/"reasoning" (also nested under "content" as a string), or
// plain text with "Summarisation:" and "Reasoning:" labels.
inline ProfileText parse_profile_reply(const std::string& reply) {
  auto from_object = [](const nlohmann::json& j, ProfileText& out) {
    if (j.is_object() && j.contains("summarisation") && j.contains("reasoning") && j["summarisation"].is_string() &&
        j["reasoning"].is_string()) {
      out.summarisation = j["summarisation"].get<std::string>();
      out.reasoning = j["reasoning"].get<std::string>();
      return true;
    }
    return false;
  };
  ProfileText out;
  auto j = nlohmann::json::parse(reply, nullptr, false);
  if (!j.is_discarded()) {
    if (from_object(j, out)) return out;
    if (j.is_object() && j.contains("content") && j["content"].is_string())
      return parse_profile_reply(j["content"].get<std::string>());
  }
  auto lower = reply;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  const auto s = lower.find("summarisation:");
  const auto r = lower.find("reasoning:");
  if (s != std::string::npos && r != std::string::npos && s < r) {
    auto trim = [](std::string x) {
      const auto b = x.find_first_not_of(" \t\r\n");
      const auto e = x.find_last_not_of(" \t\r\n");
      return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
    };
    out.summarisation = trim(reply.substr(s + 14, r - s - 14));
    out.reasoning = trim(reply.substr(r + 10));
    return out;
  }
  throw FormatError("provider reply has no summarisation/reasoning parts");
}

struct HttpProviderConfig {
  std::string url;
  std::string token;
  double timeout_s = 30.0;
  int retries = 2;

  // CLLMR_LLM_URL (required), CLLMR_LLM_TOKEN, CLLMR_LLM_TIMEOUT_S.
  static HttpProviderConfig from_env() {
    HttpProviderConfig c;
    if (const char* u = std::getenv("CLLMR_LLM_URL")) c.url = u;
    if (const char* t = std::getenv("CLLMR_LLM_TOKEN")) c.token = t;
    if (const char* s = std::getenv("CLLMR_LLM_TIMEOUT_S")) {
      char* end = nullptr;
      const double v = std::strtod(s, &end);
      if (end == s || *end != '\0' || !(v > 0)) throw ParameterError("CLLMR_LLM_TIMEOUT_S must be a positive number");
      c.timeout_s = v;
    }
    if (c.url.empty()) throw ParameterError("CLLMR_LLM_URL is not set");
    return c;
  }
};

// POSTs {"prompt": body, "max_words": 200} with a bearer token and parses the
// reply. Transport failures and non-2xx statuses are retried.
class HttpProvider final : public Provider {
 public:
  explicit HttpProvider(HttpProviderConfig cfg) : cfg_(std::move(cfg)) {}

  ProfileText generate(const PromptText& prompt, Transport& transport) const override {
    nlohmann::json req = {{"prompt", prompt.body}, {"max_words", 200}};
    std::vector<std::pair<std::string, std::string>> headers{{"Content-Type", "application/json"}};
    if (!cfg_.token.empty()) headers.emplace_back("Authorization", "Bearer " + cfg_.token);
    std::string last;
    const int attempts = cfg_.retries + 1;
    for (int a = 0; a < attempts; ++a) {
      try {
        const auto resp = transport.post(cfg_.url, headers, req.dump(), cfg_.timeout_s);
        if (resp.status >= 200 && resp.status < 300) {
          ProfileText p = parse_profile_reply(resp.body);
          p.kind = prompt.kind;
          return p;
        }
        last = "HTTP status " + std::to_string(resp.status);
      } catch (const FormatError&) {
        throw;
      } catch (const std::exception& e) {
        last = e.what();
      }
    }
    throw ProviderError("provider request failed after " + std::to_string(cfg_.retries) + " retries: " + last);
  }

  std::string name() const override { return "http"; }

 private:
  HttpProviderConfig cfg_;
};

inline ProfileText generate_profile(const Provider& provider, const PromptText& prompt, Index node_id,
                                    Transport& transport) {
  ProfileText p = provider.generate(prompt, transport);
  p.node_id = node_id;
  p.kind = prompt.kind;
  return p;
}

// ---- profile store (JSON lines) ---------------------------------------------

class ProfileStore {
 public:
  // Rejects a second profile for the same (kind, id).
  void insert(ProfileText p) {
    const auto key = std::make_pair(p.kind == Side::user ? 0 : 1, p.node_id);
    if (!entries_.emplace(key, std::move(p)).second)
      throw Error(std::string("duplicate profile for ") + to_string(key.first == 0 ? Side::user : Side::item) + " " +
                  std::to_string(key.second));
  }

  std::vector<ProfileText> of_kind(Side kind) const {
    std::vector<ProfileText> out;
    for (const auto& [key, p] : entries_)
      if (p.kind == kind) out.push_back(p);
    return out;
  }

  const ProfileText* find(Side kind, Index id) const {
    auto it = entries_.find({kind == Side::user ? 0 : 1, id});
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }

  void write_jsonl(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& [key, p] : entries_) {
      Json j = Json::object();
      j["id"] = p.node_id;
      j["kind"] = to_string(p.kind);
      j["summarisation"] = p.summarisation;
      j["reasoning"] = p.reasoning;
      out << j.dump() << '\n';
    }
  }

  static ProfileStore read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DependencyError("missing profile store " + path.string());
    ProfileStore store;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      auto fail = [&] { throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": bad profile record"); };
      if (j.is_discarded() || !j.is_object()) fail();
      if (!j.contains("id") || !j["id"].is_number_integer() || !j.contains("kind") || !j["kind"].is_string() ||
          !j.contains("summarisation") || !j["summarisation"].is_string() || !j.contains("reasoning") ||
          !j["reasoning"].is_string())
        fail();
      const auto kind = j["kind"].get<std::string>();
      if (kind != "user" && kind != "item") fail();
      ProfileText p;
      p.node_id = j["id"].get<Index>();
      p.kind = kind == "user" ? Side::user : Side::item;
      p.summarisation = j["summarisation"].get<std::string>();
      p.reasoning = j["reasoning"].get<std::string>();
      store.insert(std::move(p));
    }
    return store;
  }

 private:
  std::map<std::pair<int, Index>, ProfileText> entries_;
};

// ---- embedders ---------------------------------------------------------------

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Vector embed(const ProfileText& profile, Transport& transport) const = 0;
  virtual Index dim() const = 0;
};

// Feature hashing over words: each word maps to a fixed pseudo-random vector in
// [-1, 1]^dim, and a text embeds to the mean of its word vectors.
class HashEmbedder final : public Embedder {
 public:
  explicit HashEmbedder(Index dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    if (dim < 1) throw ParameterError("embedding dim must be >= 1");
  }

  Vector embed_text(const std::string& text) const {
    Vector out = Vector::Zero(dim_);
    const auto words = tokenize_words(text);
    if (words.empty()) return out;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (const auto& w : words) {
      Rng rng(fnv1a(w) ^ (seed_ * 0x9e3779b97f4a7c15ULL));
      for (Index k = 0; k < dim_; ++k) out(k) += u(rng);
    }
    return out / static_cast<double>(words.size());
  }

  Vector embed(const ProfileText& profile, Transport&) const override { return embed_text(profile.combined()); }
  Index dim() const override { return dim_; }

 private:
  Index dim_;
  std::uint64_t seed_;
};

// Looks vectors up by node id in a precomputed CEMB table.
class FileImportEmbedder final : public Embedder {
 public:
  explicit FileImportEmbedder(cemb::Table table) : table_(std::move(table)) {
    for (std::size_t r = 0; r < table_.ids.size(); ++r) row_of_[table_.ids[r]] = static_cast<Eigen::Index>(r);
  }
  static FileImportEmbedder from_file(const fs::path& path) { return FileImportEmbedder(cemb::read(path)); }

  bool covers(Index id) const { return row_of_.count(static_cast<std::uint32_t>(id)) != 0; }

  Vector embed(const ProfileText& profile, Transport&) const override {
    auto it = row_of_.find(static_cast<std::uint32_t>(profile.node_id));
    if (it == row_of_.end()) throw CoverageError("embedding file lacks id " + std::to_string(profile.node_id));
    return table_.values.row(it->second).transpose();
  }
  Index dim() const override { return table_.values.cols(); }

 private:
  cemb::Table table_;
  std::map<std::uint32_t, Eigen::Index> row_of_;
};

// Dense side text embeddings; row k belongs to node k.
struct SideEmbeddingTable {
  Side kind = Side::item;
  Index dim = 0;
  Matrix vectors;

  Index size() const { return vectors.rows(); }
};

// Embeds the profiles of one kind. The result must cover nodes 0..node_count-1
// exactly once.
inline SideEmbeddingTable embed_profiles(const std::vector<ProfileText>& profiles, const Embedder& embedder,
                                         Side kind, Index node_count, Transport& transport) {
  SideEmbeddingTable t;
  t.kind = kind;
  t.dim = embedder.dim();
  t.vectors = Matrix::Zero(node_count, t.dim);
  std::vector<char> hit(static_cast<std::size_t>(node_count), 0);
  if (const auto* imp = dynamic_cast<const FileImportEmbedder*>(&embedder)) {
    std::string missing;
    for (const auto& p : profiles)
      if (!imp->covers(p.node_id)) missing += (missing.empty() ? "" : ",") + std::to_string(p.node_id);
    if (!missing.empty()) throw CoverageError(std::string("embedding file lacks ") + to_string(kind) + " ids " + missing);
  }
  for (const auto& p : profiles) {
    if (p.kind != kind) continue;
    if (p.node_id < 0 || p.node_id >= node_count)
      throw CoverageError(std::string(to_string(kind)) + " id " + std::to_string(p.node_id) + " outside node space");
    if (hit[static_cast<std::size_t>(p.node_id)]) throw Error("duplicate profile for id " + std::to_string(p.node_id));
    hit[static_cast<std::size_t>(p.node_id)] = 1;
    t.vectors.row(p.node_id) = embedder.embed(p, transport).transpose();
  }
  std::string missing;
  for (Index k = 0; k < node_count; ++k)
    if (!hit[static_cast<std::size_t>(k)]) missing += (missing.empty() ? "" : ",") + std::to_string(k);
  if (!missing.empty()) throw CoverageError(std::string("no ") + to_string(kind) + " profile for ids " + missing);
  return t;
}

inline void write_table(const fs::path& path, const SideEmbeddingTable& t) { cemb::write_dense(path, t.vectors); }

inline SideEmbeddingTable read_table(const fs::path& path, Side kind, Index node_count) {
  SideEmbeddingTable t;
  t.kind = kind;
  t.vectors = cemb::read_dense(path, node_count);
  t.dim = t.vectors.cols();
  return t;
}

}  // namespace cllmr::profiles
