#pragma once

// Block-structured synthetic dataset: users and items fall into planted
// blocks, interactions favour the user's block with a skewed in-block
// popularity, and item metadata / reviews draw on block vocabularies.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace cllmr::synthetic {

namespace fs = std::filesystem;

struct Options {
  Index n_users = 500;
  Index n_items = 300;
  Index blocks = 4;
  Index min_degree = 3;
  Index max_degree = 8;
  double in_block = 0.8;     // probability an interaction stays in the user's block
  double popularity = 0.8;   // exponent of the in-block popularity skew
  double mislabel = 0.1;     // share of items whose text uses another block's words
  std::uint64_t seed = 7;
};

inline const std::vector<std::vector<std::string>>& block_vocabulary() {
  static const std::vector<std::vector<std::string>> v = {
      {"dragon", "castle", "sword", "wizard", "quest", "kingdom", "knight", "spell", "prophecy", "realm",
       "elven", "sorcery", "throne", "legend", "armour", "dungeon", "enchanted", "mythic", "rune", "saga"},
      {"galaxy", "starship", "robot", "planet", "orbit", "android", "quantum", "alien", "reactor", "colony",
       "cyborg", "nebula", "warp", "laser", "asteroid", "circuit", "station", "cosmic", "probe", "fusion"},
      {"detective", "murder", "alibi", "suspect", "clue", "witness", "verdict", "forensic", "heist", "motive",
       "inspector", "poison", "ransom", "confession", "stakeout", "informant", "fingerprint", "cipher", "smuggler", "trial"},
      {"garden", "recipe", "harvest", "kitchen", "bakery", "orchard", "herbal", "pantry", "vineyard", "seasonal",
       "picnic", "cottage", "compost", "blossom", "preserves", "farmhouse", "sourdough", "meadow", "lavender", "spice"}};
  return v;
}

inline const std::vector<std::string>& generic_vocabulary() {
  static const std::vector<std::string> v = {
      "story", "author", "chapter", "edition", "character", "journey", "world", "series", "voice", "pages",
      "classic", "modern", "volume", "narrative", "collection", "writing", "plot", "style", "scene", "ending"};
  return v;
}

inline const std::array<std::string, 5>& sentiment_words() {
  static const std::array<std::string, 5> v = {"awful", "dull", "decent", "great", "wonderful"};
  return v;
}

inline std::string user_id(Index u) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "u%04ld", static_cast<long>(u));
  return buf;
}

inline std::string item_id(Index i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "i%04ld", static_cast<long>(i));
  return buf;
}

struct Record {
  Index user = 0, item = 0;
  int rating = 0;
  std::int64_t timestamp = 0;
  std::string review;
};

struct Dataset {
  Options options;
  std::vector<Index> user_block, item_block, text_block;
  std::vector<Record> records;
  std::vector<nlohmann::ordered_json> items;  // metadata, one per item
};

inline Dataset generate(const Options& opt) {
  if (opt.blocks < 1 || opt.n_users < opt.blocks || opt.n_items < opt.blocks)
    throw ParameterError("synthetic dataset needs at least one user and item per block");
  if (opt.blocks > static_cast<Index>(block_vocabulary().size()))
    throw ParameterError("at most " + std::to_string(block_vocabulary().size()) + " blocks are supported");
  if (opt.min_degree < 1 || opt.max_degree < opt.min_degree || opt.max_degree > opt.n_items)
    throw ParameterError("invalid synthetic degree range");

  Dataset d;
  d.options = opt;
  Rng rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& blocks = block_vocabulary();
  const auto& generic = generic_vocabulary();

  for (Index u = 0; u < opt.n_users; ++u) d.user_block.push_back(u % opt.blocks);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(opt.blocks));
  for (Index i = 0; i < opt.n_items; ++i) {
    d.item_block.push_back(i % opt.blocks);
    members[static_cast<std::size_t>(i % opt.blocks)].push_back(i);
    Index tb = i % opt.blocks;
    if (unit(rng) < opt.mislabel) tb = std::uniform_int_distribution<Index>(0, opt.blocks - 1)(rng);
    d.text_block.push_back(tb);
  }

  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };

  for (Index i = 0; i < opt.n_items; ++i) {
    const auto& vocab = blocks[static_cast<std::size_t>(d.text_block[static_cast<std::size_t>(i)])];
    std::string title = pick(vocab) + " " + pick(vocab) + " " + pick(generic);
    std::string desc;
    for (int w = 0; w < 12; ++w) desc += (desc.empty() ? "" : " ") + (w % 3 == 2 ? pick(generic) : pick(vocab));
    nlohmann::ordered_json meta;
    meta["item"] = item_id(i);
    meta["title"] = title;
    meta["description"] = desc;
    d.items.push_back(std::move(meta));
  }

  // In-block popularity weights: rank r within the block gets (r + 1)^-popularity.
  std::vector<std::discrete_distribution<std::size_t>> in_block;
  for (const auto& m : members) {
    std::vector<double> w;
    for (std::size_t r = 0; r < m.size(); ++r) w.push_back(std::pow(static_cast<double>(r + 1), -opt.popularity));
    in_block.emplace_back(w.begin(), w.end());
  }

  std::int64_t clock = 1'600'000'000;
  for (Index u = 0; u < opt.n_users; ++u) {
    const Index degree = std::uniform_int_distribution<Index>(opt.min_degree, opt.max_degree)(rng);
    const Index ub = d.user_block[static_cast<std::size_t>(u)];
    std::vector<char> taken(static_cast<std::size_t>(opt.n_items), 0);
    for (Index k = 0; k < degree;) {
      Index item;
      const bool home = unit(rng) < opt.in_block;
      if (home)
        item = members[static_cast<std::size_t>(ub)][in_block[static_cast<std::size_t>(ub)](rng)];
      else
        item = std::uniform_int_distribution<Index>(0, opt.n_items - 1)(rng);
      if (taken[static_cast<std::size_t>(item)]) continue;
      taken[static_cast<std::size_t>(item)] = 1;
      ++k;
      const bool match = d.item_block[static_cast<std::size_t>(item)] == ub;
      const int rating = match ? std::uniform_int_distribution<int>(3, 5)(rng) : std::uniform_int_distribution<int>(1, 5)(rng);
      const auto& vocab = blocks[static_cast<std::size_t>(d.text_block[static_cast<std::size_t>(item)])];
      std::string review = sentiment_words()[static_cast<std::size_t>(rating - 1)] + " " + pick(vocab) + " " +
                           pick(generic) + " " + pick(vocab);
      clock += std::uniform_int_distribution<std::int64_t>(60, 86'400)(rng);
      d.records.push_back({u, item, rating, clock, std::move(review)});
    }
  }
  return d;
}

// interactions.tsv (user, item, rating, timestamp), items.jsonl (metadata)
// and reviews.jsonl ({"user", "item", "review"}).
inline void write(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream inter(dir / "interactions.tsv"), items(dir / "items.jsonl"), reviews(dir / "reviews.jsonl");
  if (!inter || !items || !reviews) throw Error("cannot write synthetic dataset to " + dir.string());
  inter << "# user\titem\trating\ttimestamp\n";
  for (const auto& r : d.records) {
    inter << user_id(r.user) << '\t' << item_id(r.item) << '\t' << r.rating << '\t' << r.timestamp << '\n';
    nlohmann::ordered_json j;
    j["user"] = user_id(r.user);
    j["item"] = item_id(r.item);
    j["review"] = r.review;
    reviews << j.dump() << '\n';
  }
  for (const auto& m : d.items) items << m.dump() << '\n';
}

// Config for the files written by write(); paths are relative to the dataset
// directory. Trainer settings are scaled down for a few hundred nodes; alpha
// is the value that scored best on validation Recall@10 for this fixture.
inline nlohmann::ordered_json default_config(const std::string& output_dir) {
  nlohmann::ordered_json j;
  j["seed"] = 0;
  j["output_dir"] = output_dir;
  j["data"] = {{"interactions", "interactions.tsv"},
               {"items", "items.jsonl"},
               {"reviews", "reviews.jsonl"},
               {"kind", "custom"},
               {"min_rating", 3}};
  j["profiles"] = {{"provider", "mock"}, {"embedder", "hash"}, {"embedding_dim", 64}};
  j["spectrum"] = {{"rank", 32}, {"noise_scale", 0.01}};
  j["backbone"] = {{"dim", 32}, {"layers", 2}};
  j["trainer"] = {{"lr", 0.01}, {"batch_size", 1024}, {"max_epochs", 60}, {"patience", 8}};
  j["inference"] = {{"alpha", 0.25}};
  return j;
}

}  // namespace cllmr::synthetic
