#pragma once

// Interaction logs: loading, 3:1:1 splitting, the normalized bipartite
// adjacency consumed by graph backbones, and dataset statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <json.hpp>

#include "common.hpp"

namespace cllmr::dataio {

namespace fs = std::filesystem;

enum class SplitTag { train, val, test, full };

inline const char* to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    case SplitTag::full: return "full";
  }
  return "?";
}

// Bijection between the raw ids found in a file and dense indices 0..n-1,
// assigned in order of first appearance.
class IdMap {
 public:
  Index intern(const std::string& raw) {
    auto [it, fresh] = index_.try_emplace(raw, static_cast<Index>(names_.size()));
    if (fresh) names_.push_back(raw);
    return it->second;
  }
  std::optional<Index> find(const std::string& raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& name(Index dense) const { return names_.at(static_cast<std::size_t>(dense)); }
  Index size() const { return static_cast<Index>(names_.size()); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Index> index_;
};

struct IdSpace {
  IdMap users;
  IdMap items;
};

struct Interaction {
  Index user = 0;
  Index item = 0;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;
};

struct InteractionDataset {
  Index n_users = 0;
  Index n_items = 0;
  std::vector<Interaction> interactions;
  SplitTag split = SplitTag::full;
  std::shared_ptr<const IdSpace> ids;

  std::size_t size() const { return interactions.size(); }

  // Sorted item lists per user.
  std::vector<std::vector<Index>> items_by_user() const {
    std::vector<std::vector<Index>> out(static_cast<std::size_t>(n_users));
    for (const auto& x : interactions) out[static_cast<std::size_t>(x.user)].push_back(x.item);
    for (auto& v : out) std::sort(v.begin(), v.end());
    return out;
  }
};

struct DatasetStats {
  Index n_users = 0;
  Index n_items = 0;
  Index n_interactions = 0;
  double density = 0.0;
};

inline double density(Index n_users, Index n_items, Index n_interactions) {
  return static_cast<double>(n_interactions) /
         (static_cast<double>(n_users) * static_cast<double>(n_items));
}

inline DatasetStats stats(const InteractionDataset& ds) {
  DatasetStats s;
  s.n_users = ds.n_users;
  s.n_items = ds.n_items;
  s.n_interactions = static_cast<Index>(ds.size());
  s.density = density(s.n_users, s.n_items, s.n_interactions);
  return s;
}

inline nlohmann::json to_json(const DatasetStats& s) {
  return {{"n_users", s.n_users}, {"n_items", s.n_items}, {"n_interactions", s.n_interactions},
          {"density", s.density}};
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

inline bool parse_int64(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtoll(s.c_str(), &end, 10);
  return end == s.c_str() + s.size();
}

struct RawRow {
  std::string user, item;
  double rating = 0.0;
  std::optional<std::int64_t> timestamp;
};

inline std::vector<RawRow> read_rows(std::istream& in, const std::string& source) {
  std::vector<RawRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    auto fail = [&](const std::string& why) {
      throw ParseError(source + ": line " + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 3 && fields.size() != 4) fail("expected 3 or 4 tab-separated fields");
    RawRow r;
    r.user = fields[0];
    r.item = fields[1];
    if (r.user.empty() || r.item.empty()) fail("empty user or item id");
    if (!parse_double(fields[2], r.rating)) fail("bad rating '" + fields[2] + "'");
    if (fields.size() == 4) {
      std::int64_t ts = 0;
      if (!parse_int64(fields[3], ts)) fail("bad timestamp '" + fields[3] + "'");
      r.timestamp = ts;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace detail

// Parses interaction records, drops rows rated below min_rating and repeated
// (user, item) pairs (first occurrence wins), and re-indexes ids densely.
inline InteractionDataset parse_interactions(std::istream& in, double min_rating,
                                             const std::string& source = "<stream>") {
  if (!(min_rating >= 0)) throw ParameterError("min_rating must be >= 0");
  const auto rows = detail::read_rows(in, source);
  auto ids = std::make_shared<IdSpace>();
  InteractionDataset ds;
  std::set<std::pair<Index, Index>> seen;
  for (const auto& r : rows) {
    if (r.rating < min_rating) continue;
    const Index u = ids->users.intern(r.user);
    const Index i = ids->items.intern(r.item);
    if (!seen.emplace(u, i).second) continue;
    ds.interactions.push_back({u, i, r.rating, r.timestamp});
  }
  if (ds.interactions.empty()) throw EmptyDatasetError(source + ": no interactions left after filtering");
  ds.n_users = ids->users.size();
  ds.n_items = ids->items.size();
  ds.split = SplitTag::full;
  ds.ids = std::move(ids);
  return ds;
}

inline InteractionDataset load_interactions(const fs::path& path, double min_rating) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open interaction file " + path.string());
  return parse_interactions(in, min_rating, path.string());
}

// Largest-remainder apportionment of n items to the given ratios. Ties in the
// remainder go to the earlier slot.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<unsigned, 3>& ratios) {
  const std::size_t total = std::accumulate(ratios.begin(), ratios.end(), std::size_t{0});
  std::array<std::size_t, 3> sizes{};
  std::array<std::size_t, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    sizes[k] = n * ratios[k] / total;
    rem[k] = n * ratios[k] % total;
    assigned += sizes[k];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k]];
  return sizes;
}

struct Splits {
  InteractionDataset train, val, test;
};

// Uniform per-interaction assignment: a seeded shuffle followed by slicing at
// the largest-remainder sizes.
inline Splits split_dataset(const InteractionDataset& ds, const std::array<unsigned, 3>& ratios,
                            std::uint64_t seed) {
  if (ds.split != SplitTag::full) throw SplitError("split_dataset expects a full (unsplit) dataset");
  for (unsigned r : ratios)
    if (r == 0) throw SplitError("split ratios must be positive");
  const unsigned total = ratios[0] + ratios[1] + ratios[2];
  if (ds.size() < total)
    throw SplitError("need at least " + std::to_string(total) + " interactions to split, got " +
                     std::to_string(ds.size()));
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto sizes = split_sizes(ds.size(), ratios);

  Splits out;
  InteractionDataset* parts[3] = {&out.train, &out.val, &out.test};
  const SplitTag tags[3] = {SplitTag::train, SplitTag::val, SplitTag::test};
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    InteractionDataset& p = *parts[k];
    p.n_users = ds.n_users;
    p.n_items = ds.n_items;
    p.ids = ds.ids;
    p.split = tags[k];
    std::vector<std::size_t> chosen(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                                    perm.begin() + static_cast<std::ptrdiff_t>(pos + sizes[static_cast<std::size_t>(k)]));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t idx : chosen) p.interactions.push_back(ds.interactions[idx]);
    pos += sizes[static_cast<std::size_t>(k)];
  }
  return out;
}

// Symmetric (n_users + n_items)^2 matrix with 1/sqrt(deg_i deg_j) on train
// edges. Users occupy rows [0, n_users), items the rows after them.
struct NormalizedAdjacency {
  Index n_users = 0;
  Index n_items = 0;
  Eigen::SparseMatrix<double, Eigen::RowMajor> matrix;
  std::vector<Index> degree;

  Index node_count() const { return n_users + n_items; }
};

inline NormalizedAdjacency build_normalized_adjacency(const InteractionDataset& train) {
  if (train.interactions.empty()) throw EmptyDatasetError("adjacency needs a nonempty train split");
  NormalizedAdjacency adj;
  adj.n_users = train.n_users;
  adj.n_items = train.n_items;
  const Index n = adj.node_count();
  adj.degree.assign(static_cast<std::size_t>(n), 0);
  for (const auto& x : train.interactions) {
    ++adj.degree[static_cast<std::size_t>(x.user)];
    ++adj.degree[static_cast<std::size_t>(train.n_users + x.item)];
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(train.size() * 2);
  for (const auto& x : train.interactions) {
    const Index u = x.user, i = train.n_users + x.item;
    const double w = 1.0 / std::sqrt(static_cast<double>(adj.degree[static_cast<std::size_t>(u)]) *
                                     static_cast<double>(adj.degree[static_cast<std::size_t>(i)]));
    trip.emplace_back(u, i, w);
    trip.emplace_back(i, u, w);
  }
  adj.matrix.resize(n, n);
  adj.matrix.setFromTriplets(trip.begin(), trip.end());
  adj.matrix.makeCompressed();
  return adj;
}

// ---- split directory -------------------------------------------------------
//
// Layout: train.tsv, val.tsv, test.tsv (original ids, same record format as
// the input), users.tsv / items.tsv (dense index <TAB> original id) and
// stats.json.

inline void write_interactions(const fs::path& path, const InteractionDataset& ds) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  for (const auto& x : ds.interactions) {
    out << ds.ids->users.name(x.user) << '\t' << ds.ids->items.name(x.item) << '\t' << x.rating;
    if (x.timestamp) out << '\t' << *x.timestamp;
    out << '\n';
  }
}

inline void write_split_dir(const fs::path& dir, const Splits& s, const DatasetStats& full_stats) {
  fs::create_directories(dir);
  write_interactions(dir / "train.tsv", s.train);
  write_interactions(dir / "val.tsv", s.val);
  write_interactions(dir / "test.tsv", s.test);
  const auto& ids = *s.train.ids;
  {
    std::ofstream u(dir / "users.tsv");
    for (Index k = 0; k < ids.users.size(); ++k) u << k << '\t' << ids.users.name(k) << '\n';
    std::ofstream i(dir / "items.tsv");
    for (Index k = 0; k < ids.items.size(); ++k) i << k << '\t' << ids.items.name(k) << '\n';
  }
  nlohmann::json j;
  j["full"] = to_json(full_stats);
  j["train"] = to_json(stats(s.train));
  j["val"] = to_json(stats(s.val));
  j["test"] = to_json(stats(s.test));
  std::ofstream(dir / "stats.json") << j.dump(2) << '\n';
}

namespace detail {

inline void read_id_map(const fs::path& path, IdMap& map) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing id map " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    std::int64_t k = 0;
    if (f.size() != 2 || !parse_int64(f[0], k) || k != map.size())
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": bad id map row");
    map.intern(f[1]);
  }
}

inline InteractionDataset read_split_file(const fs::path& path, const std::shared_ptr<const IdSpace>& ids,
                                          SplitTag tag) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing split file " + path.string());
  InteractionDataset ds;
  ds.ids = ids;
  ds.n_users = ids->users.size();
  ds.n_items = ids->items.size();
  ds.split = tag;
  for (const auto& r : read_rows(in, path.string())) {
    auto u = ids->users.find(r.user);
    auto i = ids->items.find(r.item);
    if (!u || !i) throw ParseError(path.string() + ": id not present in id maps");
    ds.interactions.push_back({*u, *i, r.rating, r.timestamp});
  }
  return ds;
}

}  // namespace detail

inline Splits load_split_dir(const fs::path& dir) {
  auto ids = std::make_shared<IdSpace>();
  detail::read_id_map(dir / "users.tsv", ids->users);
  detail::read_id_map(dir / "items.tsv", ids->items);
  std::shared_ptr<const IdSpace> shared = ids;
  Splits s;
  s.train = detail::read_split_file(dir / "train.tsv", shared, SplitTag::train);
  s.val = detail::read_split_file(dir / "val.tsv", shared, SplitTag::val);
  s.test = detail::read_split_file(dir / "test.tsv", shared, SplitTag::test);
  return s;
}

}  // namespace cllmr::dataio
