#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "common.hpp"

namespace cllmr::nn {

using ag::Var;

// Named parameter list; order is the registration order, which fixes the
// optimizer-state layout and the checkpoint file set.
using NamedParams = std::vector<std::pair<std::string, Var>>;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool zero_init = false) {
    Matrix w = Matrix::Zero(in, out);
    if (!zero_init) {
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index c = 0; c < out; ++c)
        for (Eigen::Index r = 0; r < in; ++r) w(r, c) = u(rng);
    }
    weight = ag::parameter(std::move(w));
    bias = ag::parameter(Matrix::Zero(1, out));
  }

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }

  Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Adam with bias correction. Parameters that received no gradient in a step
// are skipped, moments included.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const NamedParams& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, p] : params) {
      const Matrix& g = p.grad();
      if (g.size() == 0) continue;
      auto [it, fresh] = state_.try_emplace(name);
      if (fresh) {
        it->second.m = Matrix::Zero(g.rows(), g.cols());
        it->second.v = Matrix::Zero(g.rows(), g.cols());
      }
      Moments& s = it->second;
      s.m = beta1_ * s.m + (1.0 - beta1_) * g;
      s.v = beta2_ * s.v + (1.0 - beta2_) * g.cwiseProduct(g);
      Var handle = p;
      handle.value().array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
    }
  }

  static void zero_grad(const NamedParams& params) {
    for (const auto& [name, p] : params) {
      Var handle = p;
      handle.zero_grad();
    }
  }

 private:
  struct Moments {
    Matrix m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace cllmr::nn
