#pragma once

// Collaborative backbones. Only the LightGCN-style linear propagation ships;
// other backbones plug in through the Backbone interface.

#include <memory>
#include <string>

#include "autograd.hpp"
#include "common.hpp"
#include "dataio.hpp"

namespace cllmr::backbone {

using ag::Var;

struct BackboneConfig {
  Index dim = 32;
  Index layers = 2;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
};

// (n_users + n_items) x d, users first. Entries i.i.d. N(0, init_scale^2).
inline Matrix init_embeddings(Index n_users, Index n_items, Index dim, double init_scale, std::uint64_t seed) {
  if (dim < 1) throw ParameterError("embedding dim must be >= 1");
  if (!(init_scale >= 0)) throw ParameterError("init_scale must be >= 0");
  Matrix e(n_users + n_items, dim);
  if (init_scale == 0) return Matrix::Zero(e.rows(), e.cols());
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, init_scale);
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) e(r, c) = normal(rng);
  return e;
}

// E_l = A E_{l-1}; returns mean(E_0, ..., E_L).
inline Var propagate(const Var& e0, const ag::SparseMatrix& adjacency, Index layers) {
  if (layers < 0) throw ParameterError("layer count must be >= 0");
  require_shape(adjacency.rows() == e0.rows() && adjacency.cols() == e0.rows(), "adjacency vs embedding rows");
  Var acc = e0, cur = e0;
  for (Index l = 0; l < layers; ++l) {
    cur = ag::spmm(adjacency, cur);
    acc = ag::add(acc, cur);
  }
  return layers == 0 ? e0 : ag::scale(acc, 1.0 / static_cast<double>(layers + 1));
}

inline Matrix propagate(const Matrix& e0, const dataio::NormalizedAdjacency& adj, Index layers) {
  return propagate(Var(e0, false), adj.matrix, layers).value();
}

inline double predict_score(const Vector& user, const Vector& item) {
  require_shape(user.size() == item.size(), "score operands differ in dim");
  return user.dot(item);
}

class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual Matrix init(Index n_users, Index n_items) const = 0;
  // Collaborative representations from trainable base embeddings.
  virtual Var forward(const Var& base, const dataio::NormalizedAdjacency& graph) const = 0;
  virtual std::string name() const = 0;
  virtual Index dim() const = 0;
};

class LightGcn final : public Backbone {
 public:
  explicit LightGcn(BackboneConfig cfg) : cfg_(cfg) {
    if (cfg_.layers < 0) throw ParameterError("backbone.layers must be >= 0");
  }
  Matrix init(Index n_users, Index n_items) const override {
    return init_embeddings(n_users, n_items, cfg_.dim, cfg_.init_scale, cfg_.seed);
  }
  Var forward(const Var& base, const dataio::NormalizedAdjacency& graph) const override {
    return propagate(base, graph.matrix, cfg_.layers);
  }
  std::string name() const override { return "lightgcn"; }
  Index dim() const override { return cfg_.dim; }
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
};

}  // namespace cllmr::backbone
