#include <catch_amalgamated.hpp>

#include <set>

#include "cllmr/dataio.hpp"
#include "support.hpp"

using namespace cllmr;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

TEST_CASE("rating filter drops the low row of the five-row fixture") {
  const auto ds = dataio::load_interactions(CLLMR_TEST_DATA "/five_rows.tsv", 3.0);
  CHECK(ds.size() == 4);
  CHECK(ds.n_users == 3);
  CHECK(ds.n_items == 3);
  // u3 only rated i2, and that row survives; i2 exists because of it.
  CHECK(ds.ids->items.find("i2").has_value());
  REQUIRE(ds.interactions[2].timestamp == std::nullopt);
  CHECK(ds.interactions[0].timestamp == 1000);
}

TEST_CASE("min_rating 0 is a no-op when every rating is at least 3") {
  const std::string tsv = "a\tx\t3\nb\tx\t4\nb\ty\t5\n";
  CHECK(testing::dataset(tsv, 0).size() == testing::dataset(tsv, 3).size());
}

TEST_CASE("comments, duplicates and CRLF are handled") {
  const auto ds = testing::dataset("# header\na\tx\t5\r\na\tx\t4\nb\ty\t5\n");
  CHECK(ds.size() == 2);
  CHECK(ds.interactions[0].rating == 5.0);
}

TEST_CASE("malformed rows name their line number") {
  CHECK_THROWS_MATCHES(testing::dataset("a\tx\t5\n# c\na\tx\n"), ParseError, Catch::Matchers::MessageMatches(ContainsSubstring("line 3")));
  CHECK_THROWS_MATCHES(testing::dataset("a\tx\tfive\n"), ParseError, Catch::Matchers::MessageMatches(ContainsSubstring("line 1")));
  CHECK_THROWS_AS(testing::dataset("a\tx\t5\t12.5\n"), ParseError);
  CHECK_THROWS_AS(testing::dataset("a\tx\t2\n", 3), EmptyDatasetError);
  CHECK_THROWS_AS(dataio::load_interactions("/nonexistent/file.tsv", 0), ParseError);
}

TEST_CASE("density reproduces the Amazon statistics row") {
  const double d = dataio::density(11000, 9332, 120464);
  // 120464 / (11000 * 9332) rounded to two significant figures.
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1e", d);
  CHECK(std::string(buf) == "1.2e-03");
}

TEST_CASE("stats density matches the count formula") {
  const auto ds = dataio::load_interactions(CLLMR_TEST_DATA "/five_rows.tsv", 0);
  const auto s = dataio::stats(ds);
  CHECK_THAT(s.density, WithinAbs(5.0 / 9.0, 1e-12));
}

TEST_CASE("id re-indexing is a bijection") {
  const auto ds = testing::dataset("u9\ti3\t1\nu1\ti3\t1\nu9\ti7\t1\nu4\ti1\t1\n");
  for (Index u = 0; u < ds.n_users; ++u) CHECK(ds.ids->users.find(ds.ids->users.name(u)) == u);
  for (Index i = 0; i < ds.n_items; ++i) CHECK(ds.ids->items.find(ds.ids->items.name(i)) == i);
  CHECK(ds.ids->users.name(0) == "u9");
  CHECK(ds.ids->items.name(1) == "i7");
}

TEST_CASE("split sizes follow largest remainder") {
  CHECK(dataio::split_sizes(100, {3, 1, 1}) == std::array<std::size_t, 3>{60, 20, 20});
  // Seven items: quotas 4.2, 1.4, 1.4. Floors 4, 1, 1 leave one unit for the
  // largest remainder; val and test tie at 0.4 and val comes first.
  CHECK(dataio::split_sizes(7, {3, 1, 1}) == std::array<std::size_t, 3>{4, 2, 1});
  CHECK(dataio::split_sizes(5, {3, 1, 1}) == std::array<std::size_t, 3>{3, 1, 1});
  // Nine: quotas 5.4, 1.8, 1.8; the two leftover units go to val and test.
  CHECK(dataio::split_sizes(9, {3, 1, 1}) == std::array<std::size_t, 3>{5, 2, 2});
}

TEST_CASE("split sizes stay within one of the exact quota") {
  for (std::size_t n = 5; n < 400; ++n) {
    const auto s = dataio::split_sizes(n, {3, 1, 1});
    CHECK(s[0] + s[1] + s[2] == n);
    const double quota[3] = {n * 0.6, n * 0.2, n * 0.2};
    for (int k = 0; k < 3; ++k) CHECK(std::abs(static_cast<double>(s[k]) - quota[k]) < 1.0);
  }
}

namespace {

dataio::InteractionDataset hundred() {
  std::string tsv;
  for (int k = 0; k < 100; ++k) tsv += "u" + std::to_string(k % 13) + "\ti" + std::to_string(k) + "\t4\n";
  return testing::dataset(tsv);
}

std::set<std::pair<Index, Index>> pairs(const dataio::InteractionDataset& d) {
  std::set<std::pair<Index, Index>> out;
  for (const auto& x : d.interactions) out.emplace(x.user, x.item);
  return out;
}

}  // namespace

TEST_CASE("splits partition the dataset deterministically") {
  const auto ds = hundred();
  const auto a = dataio::split_dataset(ds, {3, 1, 1}, 42);
  const auto b = dataio::split_dataset(ds, {3, 1, 1}, 42);
  CHECK(a.train.size() == 60);
  CHECK(a.val.size() == 20);
  CHECK(a.test.size() == 20);
  CHECK(pairs(a.train) == pairs(b.train));
  CHECK(pairs(a.val) == pairs(b.val));
  CHECK(pairs(a.test) == pairs(b.test));

  auto all = pairs(a.train);
  for (const auto* part : {&a.val, &a.test})
    for (const auto& p : pairs(*part)) CHECK(all.insert(p).second);
  CHECK(all == pairs(ds));
  CHECK(a.train.split == dataio::SplitTag::train);
  CHECK(a.test.n_items == ds.n_items);

  const auto c = dataio::split_dataset(ds, {3, 1, 1}, 43);
  CHECK(pairs(c.train) != pairs(a.train));
}

TEST_CASE("split rejects tiny datasets") {
  CHECK_THROWS_AS(dataio::split_dataset(testing::dataset("a\tx\t1\na\ty\t1\nb\tx\t1\nb\ty\t1\n"), {3, 1, 1}, 0),
                  SplitError);
  CHECK_NOTHROW(dataio::split_dataset(testing::dataset("a\tx\t1\na\ty\t1\nb\tx\t1\nb\ty\t1\nc\tx\t1\n"), {3, 1, 1}, 0));
}

TEST_CASE("single edge normalizes to one") {
  const auto adj = dataio::build_normalized_adjacency(testing::edges(1, 1, {{0, 0}}));
  const Matrix a(adj.matrix);
  CHECK(a(0, 1) == 1.0);
  CHECK(a(1, 0) == 1.0);
  CHECK(a(0, 0) == 0.0);
  CHECK(a(1, 1) == 0.0);
}

TEST_CASE("user with four leaf items gets weights of one half") {
  const auto adj = dataio::build_normalized_adjacency(testing::edges(1, 4, {{0, 0}, {0, 1}, {0, 2}, {0, 3}}));
  const Matrix a(adj.matrix);
  for (Index i = 1; i <= 4; ++i) {
    CHECK(a(0, i) == 0.5);
    CHECK(a(i, 0) == 0.5);
  }
}

TEST_CASE("three by three graph matches a dense hand computation") {
  // Users 0..2, items 0..2. Edges: u0-i0, u0-i1, u1-i1, u2-i1, u2-i2.
  const auto train = testing::edges(3, 3, {{0, 0}, {0, 1}, {1, 1}, {2, 1}, {2, 2}});
  const auto adj = dataio::build_normalized_adjacency(train);

  Matrix r = Matrix::Zero(3, 3);
  for (const auto& x : train.interactions) r(x.user, x.item) = 1;
  Matrix full = Matrix::Zero(6, 6);
  full.topRightCorner(3, 3) = r;
  full.bottomLeftCorner(3, 3) = r.transpose();
  const Vector deg = full.rowwise().sum();
  Matrix expect(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) expect(i, j) = full(i, j) == 0 ? 0.0 : 1.0 / std::sqrt(deg(i) * deg(j));

  const Matrix got(adj.matrix);
  CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(got(0, 4) == 1.0 / std::sqrt(2.0 * 3.0));
  CHECK(got(4, 1) == 1.0 / std::sqrt(3.0));
}

TEST_CASE("adjacency is symmetric with zero diagonal and degree-many entries") {
  Rng rng(5);
  std::vector<std::pair<Index, Index>> e;
  std::set<std::pair<Index, Index>> seen;
  std::uniform_int_distribution<Index> pu(0, 19), pi(0, 29);
  while (e.size() < 120) {
    std::pair<Index, Index> p{pu(rng), pi(rng)};
    if (seen.insert(p).second) e.push_back(p);
  }
  const auto adj = dataio::build_normalized_adjacency(testing::edges(20, 30, e));
  const Matrix a(adj.matrix);
  CHECK(a == a.transpose());
  CHECK(a.diagonal().isZero(0));
  for (Index n = 0; n < adj.node_count(); ++n) CHECK(adj.matrix.row(n).nonZeros() == adj.degree[n]);
  // Isolated nodes keep zero rows.
  for (Index n = 0; n < adj.node_count(); ++n)
    if (adj.degree[n] == 0) CHECK(a.row(n).isZero(0));
}

TEST_CASE("split directory round-trips") {
  testing::TempDir tmp("splitdir");
  const auto ds = hundred();
  const auto s = dataio::split_dataset(ds, {3, 1, 1}, 1);
  dataio::write_split_dir(tmp.path(), s, dataio::stats(ds));
  for (const char* f : {"train.tsv", "val.tsv", "test.tsv", "users.tsv", "items.tsv", "stats.json"})
    CHECK(fs::exists(tmp / f));
  const auto back = dataio::load_split_dir(tmp.path());
  CHECK(pairs(back.train) == pairs(s.train));
  CHECK(pairs(back.val) == pairs(s.val));
  CHECK(pairs(back.test) == pairs(s.test));
  CHECK(back.train.n_users == ds.n_users);
  CHECK(back.train.ids->items.name(5) == ds.ids->items.name(5));
}
