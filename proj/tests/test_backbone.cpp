#include <catch_amalgamated.hpp>

#include "cllmr/backbone.hpp"
#include "cllmr/trainer.hpp"
#include "support.hpp"

using namespace cllmr;
using namespace cllmr::backbone;
using ag::Var;
using Catch::Matchers::WithinAbs;

namespace {

dataio::NormalizedAdjacency single_edge() {
  return dataio::build_normalized_adjacency(testing::edges(1, 1, {{0, 0}}));
}

}  // namespace

TEST_CASE("init is seeded, scalable and has the requested variance") {
  CHECK(init_embeddings(3, 4, 8, 0.1, 5) == init_embeddings(3, 4, 8, 0.1, 5));
  CHECK(init_embeddings(3, 4, 8, 0.1, 5) != init_embeddings(3, 4, 8, 0.1, 6));
  CHECK(init_embeddings(3, 4, 8, 0.0, 5).isZero(0));
  const Matrix e = init_embeddings(1000, 2125, 32, 0.1, 1);
  REQUIRE(e.size() == 100000);
  const double mean = e.mean();
  const double var = (e.array() - mean).square().sum() / static_cast<double>(e.size() - 1);
  CHECK(std::abs(var - 0.01) < 0.05 * 0.01);
  CHECK_THROWS_AS(init_embeddings(1, 1, 0, 0.1, 0), ParameterError);
}

TEST_CASE("zero layers return the base embeddings") {
  const auto adj = single_edge();
  const Matrix e0 = Matrix::Random(2, 3);
  CHECK(propagate(e0, adj, 0) == e0);
}

TEST_CASE("single edge propagation by hand") {
  const auto adj = single_edge();
  Matrix e0(2, 2);
  e0 << 1, 0, 0, 1;
  const Matrix one = propagate(e0, adj, 1);
  CHECK_THAT(one(0, 0), WithinAbs(0.5, 1e-15));
  CHECK_THAT(one(0, 1), WithinAbs(0.5, 1e-15));
  const Matrix two = propagate(e0, adj, 2);
  CHECK_THAT(two(0, 0), WithinAbs(2.0 / 3.0, 1e-15));
  CHECK_THAT(two(0, 1), WithinAbs(1.0 / 3.0, 1e-15));
  CHECK_THROWS_AS(propagate(e0, adj, -1), ParameterError);
}

TEST_CASE("propagation is linear") {
  const auto adj = dataio::build_normalized_adjacency(testing::edges(3, 4, {{0, 0}, {0, 1}, {1, 1}, {2, 3}, {1, 2}}));
  const Matrix e0 = Matrix::Random(7, 5);
  for (double a : {-2.0, 0.0, 0.3, 7.5})
    CHECK((propagate(Matrix(a * e0), adj, 3) - a * propagate(e0, adj, 3)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("propagation is permutation equivariant") {
  const std::vector<std::pair<Index, Index>> e{{0, 0}, {0, 1}, {1, 1}, {2, 3}, {1, 2}, {2, 0}};
  const auto adj = dataio::build_normalized_adjacency(testing::edges(3, 4, e));
  // Relabel users by pu and items by pi.
  const std::vector<Index> pu{2, 0, 1}, pi{3, 1, 0, 2};
  std::vector<std::pair<Index, Index>> relabeled;
  for (auto [u, i] : e) relabeled.emplace_back(pu[u], pi[i]);
  const auto adj2 = dataio::build_normalized_adjacency(testing::edges(3, 4, relabeled));
  const Matrix e0 = Matrix::Random(7, 4);
  Matrix e0p(7, 4);
  for (Index u = 0; u < 3; ++u) e0p.row(pu[u]) = e0.row(u);
  for (Index i = 0; i < 4; ++i) e0p.row(3 + pi[i]) = e0.row(3 + i);
  const Matrix out = propagate(e0, adj, 2), outp = propagate(e0p, adj2, 2);
  for (Index u = 0; u < 3; ++u) CHECK((outp.row(pu[u]) - out.row(u)).cwiseAbs().maxCoeff() < 1e-12);
  for (Index i = 0; i < 4; ++i) CHECK((outp.row(3 + pi[i]) - out.row(3 + i)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("BPR through propagation matches central differences") {
  // Two users and two items.
  const auto adj = dataio::build_normalized_adjacency(testing::edges(2, 2, {{0, 0}, {1, 0}, {1, 1}}));
  std::srand(3);
  Var base = ag::parameter(Matrix::Random(4, 3));
  auto f = [&] {
    const Var e = propagate(base, adj.matrix, 2);
    const Var users = ag::gather_rows(e, {0, 1, 1});
    const Var pos = ag::gather_rows(e, {2, 2, 3});
    const Var neg = ag::gather_rows(e, {3, 3, 2});
    return trainer::bpr_loss(ag::row_dot(users, pos), ag::row_dot(users, neg));
  };
  CHECK(testing::gradient_check({base}, f) < 1e-4);
}

TEST_CASE("scores are inner products") {
  Vector a(2), b(2);
  a << 1, 0;
  CHECK(predict_score(a, a) == 1.0);
  b << 0, 1;
  CHECK(predict_score(a, b) == 0.0);
  a << 1, 2;
  b << 3, 4;
  CHECK(predict_score(a, b) == 11.0);
  CHECK_THROWS_AS(predict_score(a, Vector::Zero(3)), ShapeError);
}

TEST_CASE("lightgcn backbone wires init and forward") {
  BackboneConfig c;
  c.dim = 4;
  c.layers = 1;
  c.seed = 2;
  LightGcn g(c);
  const Matrix e0 = g.init(1, 1);
  CHECK(e0.rows() == 2);
  CHECK(e0.cols() == 4);
  CHECK(g.forward(Var(e0), single_edge()).value() == propagate(e0, single_edge(), 1));
  CHECK(g.name() == "lightgcn");
}
