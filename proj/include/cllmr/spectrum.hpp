#pragma once

// Spectral conditioners: truncated SVD of the binary training matrix and the
// per-node noisy spectral vectors fed to the side-information encoder's prior.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "common.hpp"
#include "dataio.hpp"

namespace cllmr::spectrum {

enum class Source { raw, normalized };
enum class Scope { per_node, global };
enum class NoiseMode { aligned, symmetric };

struct SpectralFactors {
  Index rank = 0;
  Matrix left;              // n_users x k
  Matrix right;             // n_items x k
  Vector singular_values;   // k, nonincreasing
};

struct SvdOptions {
  Source source = Source::raw;
  // Matrices with at most this many cells use a dense SVD; larger ones use a
  // randomized range finder with power iterations.
  Index dense_cell_limit = 4'000'000;
  Index oversample = 10;
  int power_iterations = 6;
};

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline SparseMatrix interaction_matrix(const dataio::InteractionDataset& train, Source source) {
  std::vector<double> du(static_cast<std::size_t>(train.n_users), 0.0), di(static_cast<std::size_t>(train.n_items), 0.0);
  for (const auto& x : train.interactions) {
    du[static_cast<std::size_t>(x.user)] += 1;
    di[static_cast<std::size_t>(x.item)] += 1;
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(train.size());
  for (const auto& x : train.interactions) {
    double w = 1.0;
    if (source == Source::normalized)
      w = 1.0 / std::sqrt(du[static_cast<std::size_t>(x.user)] * di[static_cast<std::size_t>(x.item)]);
    trip.emplace_back(x.user, x.item, w);
  }
  SparseMatrix r(train.n_users, train.n_items);
  // Duplicates would sum; callers pass split datasets, which have none.
  r.setFromTriplets(trip.begin(), trip.end());
  return r;
}

namespace detail {

inline Matrix orthonormal_basis(const Matrix& y) {
  Eigen::HouseholderQR<Matrix> qr(y);
  return qr.householderQ() * Matrix::Identity(y.rows(), y.cols());
}

// Flip each component so that the largest-magnitude entry of its right
// vector is positive (first index wins ties).
inline void fix_signs(Matrix& u, Matrix& v) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      if (std::abs(v(r, j)) > best) {
        best = std::abs(v(r, j));
        arg = r;
      }
    }
    if (v(arg, j) < 0) {
      v.col(j) *= -1.0;
      u.col(j) *= -1.0;
    }
  }
}

}  // namespace detail

inline SpectralFactors truncated_svd(const SparseMatrix& a, Index k, std::uint64_t seed, const SvdOptions& opt = {}) {
  const Index m = a.rows(), n = a.cols();
  if (k < 1 || k > std::min(m, n))
    throw RankError("rank k=" + std::to_string(k) + " outside [1, " + std::to_string(std::min(m, n)) + "]");
  SpectralFactors f;
  f.rank = k;
  Matrix u, v;
  Vector s;
  if (m * n <= opt.dense_cell_limit) {
    Matrix dense = Matrix(a);
    Eigen::BDCSVD<Matrix> svd(dense, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU().leftCols(k);
    v = svd.matrixV().leftCols(k);
    s = svd.singularValues().head(k);
  } else {
    const Index l = std::min<Index>(k + opt.oversample, std::min(m, n));
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix omega(n, l);
    for (Index c = 0; c < l; ++c)
      for (Index r = 0; r < n; ++r) omega(r, c) = normal(rng);
    Matrix q = detail::orthonormal_basis(a * omega);
    const SparseMatrix at = a.transpose();
    for (int it = 0; it < opt.power_iterations; ++it) {
      Matrix z = detail::orthonormal_basis(at * q);
      q = detail::orthonormal_basis(a * z);
    }
    Matrix b = (at * q).transpose();  // l x n
    Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = q * svd.matrixU().leftCols(k);
    v = svd.matrixV().leftCols(k);
    s = svd.singularValues().head(k);
  }
  detail::fix_signs(u, v);
  f.left = std::move(u);
  f.right = std::move(v);
  f.singular_values = std::move(s);
  return f;
}

inline SpectralFactors truncated_svd(const dataio::InteractionDataset& train, Index k, std::uint64_t seed,
                                     const SvdOptions& opt = {}) {
  return truncated_svd(interaction_matrix(train, opt.source), k, seed, opt);
}

// Clean conditioner of one node: its spectral row scaled by the singular values.
inline Vector node_conditioner(const SpectralFactors& f, Index node, Side side) {
  const Matrix& rows = side == Side::user ? f.left : f.right;
  if (node < 0 || node >= rows.rows())
    throw ParameterError(std::string(to_string(side)) + " " + std::to_string(node) + " outside factor range");
  return rows.row(node).transpose().cwiseProduct(f.singular_values);
}

// All clean conditioners of one side, one row per node. The global scope
// gives every node the singular-value vector itself.
inline Matrix conditioner_table(const SpectralFactors& f, Side side, Scope scope = Scope::per_node) {
  const Matrix& rows = side == Side::user ? f.left : f.right;
  if (scope == Scope::global) return f.singular_values.transpose().replicate(rows.rows(), 1);
  return rows * f.singular_values.asDiagonal();
}

struct SpectralConditioner {
  Vector clean;
  Vector noisy;
  Vector omega;
  double noise_scale = 0.0;
};

inline double sign(double x) { return (x > 0) - (x < 0); }

// m = clean + eps * (omega ⊙ sign(clean)) with omega ~ U(0,1)^k, or
// m = clean + eps * (2 omega - 1) in symmetric mode.
inline Vector apply_noise(const Vector& clean, const Vector& omega, double eps, NoiseMode mode = NoiseMode::aligned) {
  require_shape(clean.size() == omega.size(), "noise draw vs conditioner");
  Vector m = clean;
  for (Eigen::Index j = 0; j < m.size(); ++j) {
    const double delta = mode == NoiseMode::aligned ? omega(j) * sign(clean(j)) : 2.0 * omega(j) - 1.0;
    m(j) += eps * delta;
  }
  return m;
}

inline SpectralConditioner inject_noise(const Vector& clean, double eps, Rng& rng, NoiseMode mode = NoiseMode::aligned) {
  if (!(eps >= 0)) throw ParameterError("noise scale must be >= 0");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SpectralConditioner c;
  c.clean = clean;
  c.noise_scale = eps;
  c.omega.resize(clean.size());
  for (Eigen::Index j = 0; j < clean.size(); ++j) c.omega(j) = u(rng);
  c.noisy = apply_noise(clean, c.omega, eps, mode);
  return c;
}

struct ConditionerTable {
  Matrix clean;
  Matrix noisy;
  Matrix omega;
  double noise_scale = 0.0;
};

struct ConditionerOptions {
  double noise_scale = 0.01;
  NoiseMode mode = NoiseMode::aligned;
  Scope scope = Scope::per_node;
};

// Draws one omega per node, users first, from a single seeded stream.
inline std::pair<ConditionerTable, ConditionerTable> build_conditioners(const SpectralFactors& f,
                                                                        const ConditionerOptions& opt,
                                                                        std::uint64_t seed) {
  if (!(opt.noise_scale >= 0)) throw ParameterError("noise scale must be >= 0");
  Rng rng(seed);
  auto one_side = [&](Side side) {
    ConditionerTable t;
    t.clean = conditioner_table(f, side, opt.scope);
    t.noisy.resizeLike(t.clean);
    t.omega.resizeLike(t.clean);
    t.noise_scale = opt.noise_scale;
    for (Eigen::Index r = 0; r < t.clean.rows(); ++r) {
      auto c = inject_noise(t.clean.row(r).transpose(), opt.noise_scale, rng, opt.mode);
      t.noisy.row(r) = c.noisy.transpose();
      t.omega.row(r) = c.omega.transpose();
    }
    return t;
  };
  auto users = one_side(Side::user);
  auto items = one_side(Side::item);
  return {std::move(users), std::move(items)};
}

}  // namespace cllmr::spectrum
