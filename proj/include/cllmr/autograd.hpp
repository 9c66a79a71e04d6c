#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Var is a handle to a node in a dynamically built expression graph. Nodes
// created from parameters (requires_grad = true) record a backward closure;
// constant subgraphs record nothing and cost the same as plain Eigen code.
// Rows are samples, columns are features throughout.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "common.hpp"

namespace cllmr::ag {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(double v, bool requires_grad = false) {
    return Var(Matrix::Constant(1, 1, v), requires_grad);
  }

  const Matrix& value() const { return node_->value; }
  Matrix& value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  // Detached copy: same value, no history.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_result(Matrix value, std::initializer_list<Var> inputs,
                       std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  for (const Var& in : inputs) {
    if (in.requires_grad()) {
      out.node()->requires_grad = true;
      break;
    }
  }
  if (out.requires_grad()) {
    for (const Var& in : inputs) out.node()->parents.push_back(in.node());
    out.node()->backward = std::move(backward);
  }
  return out;
}

inline void push(const std::shared_ptr<Node>& n, const Matrix& g) {
  if (n->requires_grad) n->accumulate(g);
}

}  // namespace detail

// Runs reverse accumulation from a 1x1 root.
inline void backward(const Var& root) {
  require_shape(root.rows() == 1 && root.cols() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs from long propagation chains can be deep.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---- elementwise / structural ops ----------------------------------------

inline Var add(const Var& a, const Var& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() + b.value(), {a, b}, [pa, pb](Node& n) {
    detail::push(pa, n.grad);
    detail::push(pb, n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() - b.value(), {a, b}, [pa, pb](Node& n) {
    detail::push(pa, n.grad);
    detail::push(pb, -n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node& n) {
    detail::push(pa, n.grad.cwiseProduct(pb->value));
    detail::push(pb, n.grad.cwiseProduct(pa->value));
  });
}

inline Var scale(const Var& a, double c) {
  auto pa = a.node();
  return detail::make_result(a.value() * c, {a}, [pa, c](Node& n) { detail::push(pa, n.grad * c); });
}

inline Var add_scalar(const Var& a, double c) {
  auto pa = a.node();
  return detail::make_result((a.value().array() + c).matrix(), {a},
                             [pa](Node& n) { detail::push(pa, n.grad); });
}

// a * s where s is a 1x1 Var.
inline Var mul_scalar(const Var& a, const Var& s) {
  require_shape(s.rows() == 1 && s.cols() == 1, "mul_scalar expects 1x1 factor");
  auto pa = a.node(), ps = s.node();
  return detail::make_result(a.value() * s.item(), {a, s}, [pa, ps](Node& n) {
    detail::push(pa, n.grad * ps->value(0, 0));
    detail::push(ps, Matrix::Constant(1, 1, n.grad.cwiseProduct(pa->value).sum()));
  });
}

// Adds a 1 x cols row vector to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  auto pa = a.node(), pr = row.node();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return detail::make_result(std::move(v), {a, row}, [pa, pr](Node& n) {
    detail::push(pa, n.grad);
    detail::push(pr, n.grad.colwise().sum());
  });
}

inline Var matmul(const Var& a, const Var& b) {
  require_shape(a.cols() == b.rows(), "matmul inner dimension");
  auto pa = a.node(), pb = b.node();
  return detail::make_result(a.value() * b.value(), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

// s * x for a constant sparse s. The caller keeps s alive for the graph's lifetime.
inline Var spmm(const SparseMatrix& s, const Var& x) {
  require_shape(s.cols() == x.rows(), "spmm");
  auto px = x.node();
  const SparseMatrix* sp = &s;
  Matrix v = s * x.value();
  return detail::make_result(std::move(v), {x}, [px, sp](Node& n) {
    detail::push(px, sp->transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().transpose(), {a},
                             [pa](Node& n) { detail::push(pa, n.grad.transpose()); });
}

inline Var tanh(const Var& a) {
  auto pa = a.node();
  Matrix y = a.value().array().tanh().matrix();
  return detail::make_result(y, {a}, [pa, y](Node& n) {
    detail::push(pa, n.grad.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var sigmoid(const Var& a) {
  auto pa = a.node();
  Matrix y = a.value().unaryExpr([](double x) { return logistic(x); });
  return detail::make_result(y, {a}, [pa, y](Node& n) {
    detail::push(pa, n.grad.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Var exp(const Var& a) {
  auto pa = a.node();
  Matrix y = a.value().array().exp().matrix();
  return detail::make_result(y, {a}, [pa, y](Node& n) { detail::push(pa, n.grad.cwiseProduct(y)); });
}

inline Var log(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().array().log().matrix(), {a}, [pa](Node& n) {
    detail::push(pa, n.grad.cwiseQuotient(pa->value));
  });
}

inline Var square(const Var& a) {
  auto pa = a.node();
  return detail::make_result(a.value().array().square().matrix(), {a}, [pa](Node& n) {
    detail::push(pa, 2.0 * n.grad.cwiseProduct(pa->value));
  });
}

// log(logistic(x)), stable for large |x|.
inline Var log_sigmoid(const Var& a) {
  auto pa = a.node();
  Matrix y = a.value().unaryExpr([](double x) {
    return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
  });
  return detail::make_result(std::move(y), {a}, [pa](Node& n) {
    Matrix d = pa->value.unaryExpr([](double x) { return 1.0 - logistic(x); });
    detail::push(pa, n.grad.cwiseProduct(d));
  });
}

// Gradient passes only where lo < x < hi.
inline Var clamp(const Var& a, double lo, double hi) {
  auto pa = a.node();
  Matrix y = a.value().cwiseMax(lo).cwiseMin(hi);
  return detail::make_result(std::move(y), {a}, [pa, lo, hi](Node& n) {
    Matrix mask = pa->value.unaryExpr([lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    detail::push(pa, n.grad.cwiseProduct(mask));
  });
}

// ---- reductions ------------------------------------------------------------

inline Var sum(const Var& a) {
  auto pa = a.node();
  return detail::make_result(Matrix::Constant(1, 1, a.value().sum()), {a}, [pa](Node& n) {
    detail::push(pa, Matrix::Constant(pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
  });
}

inline Var mean(const Var& a) {
  require_shape(a.value().size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// Per-row sum: n x c -> n x 1.
inline Var row_sum(const Var& a) {
  auto pa = a.node();
  Matrix v = a.value().rowwise().sum();
  return detail::make_result(std::move(v), {a}, [pa](Node& n) {
    detail::push(pa, n.grad.replicate(1, pa->value.cols()));
  });
}

inline Var row_dot(const Var& a, const Var& b) { return row_sum(mul(a, b)); }

// Per-row log-sum-exp: n x c -> n x 1.
inline Var logsumexp_rows(const Var& a) {
  auto pa = a.node();
  const Matrix& x = a.value();
  Vector mx = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - mx;
  Matrix e = shifted.array().exp().matrix();
  Vector s = e.rowwise().sum();
  Matrix v = (mx.array() + s.array().log()).matrix();
  Matrix soft = e.array().colwise() / s.array();
  return detail::make_result(std::move(v), {a}, [pa, soft](Node& n) {
    detail::push(pa, soft.array().colwise() * n.grad.col(0).array());
  });
}

// Diagonal of a square matrix as an n x 1 column.
inline Var diag(const Var& a) {
  require_shape(a.rows() == a.cols(), "diag of non-square");
  auto pa = a.node();
  Matrix v = a.value().diagonal();
  return detail::make_result(std::move(v), {a}, [pa](Node& n) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.diagonal() = n.grad.col(0);
    detail::push(pa, g);
  });
}

// ---- indexing --------------------------------------------------------------

inline Var gather_rows(const Var& a, const std::vector<Index>& rows) {
  auto pa = a.node();
  Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require_shape(rows[k] >= 0 && rows[k] < a.rows(), "gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(k)) = a.value().row(rows[k]);
  }
  return detail::make_result(std::move(v), {a}, [pa, rows](Node& n) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) g.row(rows[k]) += n.grad.row(static_cast<Eigen::Index>(k));
    detail::push(pa, g);
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  require_shape(a.rows() == b.rows(), "concat_cols");
  auto pa = a.node(), pb = b.node();
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return detail::make_result(std::move(v), {a, b}, [pa, pb, ca, cb](Node& n) {
    detail::push(pa, n.grad.leftCols(ca));
    detail::push(pb, n.grad.rightCols(cb));
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  require_shape(a.cols() == b.cols(), "concat_rows");
  auto pa = a.node(), pb = b.node();
  Matrix v(a.rows() + b.rows(), a.cols());
  v << a.value(), b.value();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return detail::make_result(std::move(v), {a, b}, [pa, pb, ra, rb](Node& n) {
    detail::push(pa, n.grad.topRows(ra));
    detail::push(pb, n.grad.bottomRows(rb));
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && start + count <= a.cols(), "slice_cols");
  auto pa = a.node();
  Matrix v = a.value().middleCols(start, count);
  return detail::make_result(std::move(v), {a}, [pa, start, count](Node& n) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.middleCols(start, count) = n.grad;
    detail::push(pa, g);
  });
}

// Scales every row to unit L2 norm. Zero rows stay zero and pass no gradient,
// which gives cosine(0, v) = 0.
inline Var normalize_rows(const Var& a) {
  auto pa = a.node();
  Vector norms = a.value().rowwise().norm();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    if (norms(r) > 0) y.row(r) /= norms(r);
  }
  return detail::make_result(y, {a}, [pa, y, norms](Node& n) {
    Matrix g = Matrix::Zero(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      if (norms(r) <= 0) continue;
      const double proj = y.row(r).dot(n.grad.row(r));
      g.row(r) = (n.grad.row(r) - proj * y.row(r)) / norms(r);
    }
    detail::push(pa, g);
  });
}

// ---- parameters ------------------------------------------------------------

inline Var parameter(Matrix value) { return Var(std::move(value), true); }

}  // namespace cllmr::ag
