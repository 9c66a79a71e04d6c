#include <catch_amalgamated.hpp>

#include "cllmr/spectrum.hpp"
#include "support.hpp"

using namespace cllmr;
using namespace cllmr::spectrum;
using Catch::Matchers::WithinAbs;

namespace {

SparseMatrix sparse(const Matrix& d) { return d.sparseView(); }

Matrix random_binary(Index rows, Index cols, Rng& rng, double p = 0.4) {
  std::bernoulli_distribution b(p);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = b(rng) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST_CASE("diagonal matrix keeps its diagonal as singular values") {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 3;
  d(1, 1) = 2;
  const auto f = truncated_svd(sparse(d), 2, 0);
  CHECK_THAT(f.singular_values(0), WithinAbs(3, 1e-12));
  CHECK_THAT(f.singular_values(1), WithinAbs(2, 1e-12));
  const Vector m = node_conditioner(f, 0, Side::user);
  CHECK_THAT(m(0), WithinAbs(3, 1e-12));
  CHECK_THAT(m(1), WithinAbs(0, 1e-12));
}

TEST_CASE("identity has unit singular values") {
  const auto f = truncated_svd(sparse(Matrix::Identity(4, 4)), 4, 0);
  for (int k = 0; k < 4; ++k) CHECK_THAT(f.singular_values(k), WithinAbs(1, 1e-12));
}

TEST_CASE("rank-one matrix matches the eigen oracle") {
  const Matrix a = Matrix::Ones(2, 2);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a.transpose() * a);
  const double oracle = std::sqrt(eig.eigenvalues().maxCoeff());
  const auto f = truncated_svd(sparse(a), 1, 0);
  CHECK_THAT(f.singular_values(0), WithinAbs(oracle, 1e-12));
  CHECK_THAT(oracle, WithinAbs(2, 1e-12));
}

TEST_CASE("rank-one users share one direction scaled by row norm") {
  // Rows proportional to [1, 2, 2]: every user conditioner is the row norm
  // times the same unit direction, up to the shared sign.
  Matrix a(3, 3);
  a << 1, 2, 2, 2, 4, 4, 0, 0, 0;
  const auto f = truncated_svd(sparse(a), 1, 0);
  const double c0 = node_conditioner(f, 0, Side::user)(0);
  const double c1 = node_conditioner(f, 1, Side::user)(0);
  CHECK_THAT(std::abs(c0), WithinAbs(3, 1e-12));
  CHECK_THAT(std::abs(c1), WithinAbs(6, 1e-12));
  CHECK(c0 * c1 > 0);
  CHECK(node_conditioner(f, 2, Side::user).isZero(0));
}

TEST_CASE("isolated nodes get zero conditioners") {
  const auto train = testing::edges(3, 4, {{0, 0}, {0, 1}, {2, 1}, {2, 3}});
  const auto f = truncated_svd(train, 2, 0);
  CHECK(node_conditioner(f, 1, Side::user).norm() < 1e-12);  // user 1 has no edges
  CHECK(node_conditioner(f, 2, Side::item).norm() < 1e-12);  // nor does item 2
  CHECK_THROWS_AS(node_conditioner(f, 3, Side::user), ParameterError);
}

TEST_CASE("rank out of range is rejected") {
  const auto a = sparse(Matrix::Identity(3, 5));
  CHECK_THROWS_AS(truncated_svd(a, 0, 0), RankError);
  CHECK_THROWS_AS(truncated_svd(a, 4, 0), RankError);
}

TEST_CASE("truncation error on random binary matrices matches a dense oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_binary(8, 6, rng);
    Eigen::JacobiSVD<Matrix> oracle(a);
    const Vector s = oracle.singularValues();
    for (Index k = 1; k <= 3; ++k) {
      const auto f = truncated_svd(sparse(a), k, 0);
      const Matrix approx = f.left * f.singular_values.asDiagonal() * f.right.transpose();
      const double err = (a - approx).norm();
      const double expect = std::sqrt(s.tail(s.size() - k).squaredNorm());
      CHECK_THAT(err, WithinAbs(expect, 1e-6));
    }
  }
}

TEST_CASE("factors have unit columns and sorted values") {
  Rng rng(4);
  const Matrix a = random_binary(30, 20, rng, 0.2);
  for (bool randomized : {false, true}) {
    SvdOptions opt;
    if (randomized) opt.dense_cell_limit = 0;
    const auto f = truncated_svd(sparse(a), 5, 9, opt);
    for (Index j = 0; j < 5; ++j) {
      CHECK_THAT(f.left.col(j).norm(), WithinAbs(1, 1e-6));
      CHECK_THAT(f.right.col(j).norm(), WithinAbs(1, 1e-6));
      if (j) CHECK(f.singular_values(j) <= f.singular_values(j - 1));
      CHECK(f.singular_values(j) >= 0);
    }
  }
}

TEST_CASE("randomized path agrees with the dense path") {
  Rng rng(8);
  // Low-rank signal so the leading values are well separated.
  const Matrix a = (random_binary(80, 3, rng, 0.5) * random_binary(3, 60, rng, 0.5)).cwiseMin(1.0);
  const auto dense = truncated_svd(sparse(a), 3, 1);
  SvdOptions opt;
  opt.dense_cell_limit = 0;
  const auto approx = truncated_svd(sparse(a), 3, 1, opt);
  CHECK((dense.singular_values - approx.singular_values).cwiseAbs().maxCoeff() < 1e-6);
  const Matrix rd = dense.left * dense.singular_values.asDiagonal() * dense.right.transpose();
  const Matrix ra = approx.left * approx.singular_values.asDiagonal() * approx.right.transpose();
  CHECK((rd - ra).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("noise with a pinned draw") {
  Vector clean(1), omega(1);
  clean << 2.0;
  omega << 0.5;
  CHECK_THAT(apply_noise(clean, omega, 0.01)(0), WithinAbs(2.005, 1e-15));
  clean << -2.0;
  CHECK_THAT(apply_noise(clean, omega, 0.01)(0), WithinAbs(-2.005, 1e-15));
  clean << 0.0;
  CHECK(apply_noise(clean, omega, 0.7)(0) == 0.0);
  // Symmetric mode ignores the sign: 2 * 0.5 - 1 = 0.
  clean << 2.0;
  CHECK(apply_noise(clean, omega, 0.01, NoiseMode::symmetric)(0) == 2.0);
}

TEST_CASE("zero noise leaves the conditioner unchanged") {
  Rng rng(1);
  const Vector clean = Vector::Random(16);
  const auto c = inject_noise(clean, 0.0, rng);
  CHECK(c.noisy == clean);
  CHECK_THROWS_AS(inject_noise(clean, -0.1, rng), ParameterError);
}

TEST_CASE("aligned noise preserves signs and stays within the scale") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Vector clean = Vector::Random(12);
    clean(trial % 12) = 0.0;
    const double eps = 0.001 * (1 + trial % 100);
    const auto c = inject_noise(clean, eps, rng);
    for (Eigen::Index j = 0; j < clean.size(); ++j) {
      CHECK(sign(c.noisy(j)) == sign(clean(j)));
      CHECK(std::abs(c.noisy(j) - clean(j)) <= eps);
      CHECK(c.omega(j) >= 0.0);
      CHECK(c.omega(j) < 1.0);
    }
  }
}

TEST_CASE("conditioners are deterministic for fixed inputs") {
  Rng rng(6);
  const Matrix a = random_binary(25, 15, rng, 0.3);
  std::vector<std::pair<Index, Index>> e;
  for (Index u = 0; u < 25; ++u)
    for (Index i = 0; i < 15; ++i)
      if (a(u, i) != 0) e.emplace_back(u, i);
  const auto train = testing::edges(25, 15, e);
  ConditionerOptions opt;
  opt.noise_scale = 0.05;
  const auto x = build_conditioners(truncated_svd(train, 4, 3), opt, 17);
  const auto y = build_conditioners(truncated_svd(train, 4, 3), opt, 17);
  CHECK(x.first.noisy == y.first.noisy);
  CHECK(x.second.noisy == y.second.noisy);
  CHECK(x.first.noisy.rows() == 25);
  CHECK(x.second.noisy.cols() == 4);
  const auto z = build_conditioners(truncated_svd(train, 4, 3), opt, 18);
  CHECK(z.first.noisy != x.first.noisy);
}

TEST_CASE("global scope repeats the singular values") {
  const auto f = truncated_svd(sparse(Matrix::Identity(3, 3) * 2), 2, 0);
  const Matrix g = conditioner_table(f, Side::item, Scope::global);
  CHECK(g.rows() == 3);
  for (Index r = 0; r < 3; ++r) CHECK(g.row(r) == f.singular_values.transpose());
}

TEST_CASE("normalized source scales entries by degree") {
  const auto train = testing::edges(2, 2, {{0, 0}, {0, 1}, {1, 1}});
  const Matrix raw(interaction_matrix(train, Source::raw));
  const Matrix norm(interaction_matrix(train, Source::normalized));
  CHECK(raw(0, 1) == 1.0);
  CHECK_THAT(norm(0, 1), WithinAbs(1.0 / 2.0, 1e-15));
  CHECK_THAT(norm(0, 0), WithinAbs(1.0 / std::sqrt(2.0), 1e-15));
  CHECK(norm(1, 0) == 0.0);
}
