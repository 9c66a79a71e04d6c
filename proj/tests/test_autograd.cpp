#include <catch_amalgamated.hpp>

#include "cllmr/autograd.hpp"
#include "cllmr/nn.hpp"
#include "support.hpp"

using namespace cllmr;
using ag::Var;
using Catch::Matchers::WithinAbs;

namespace {

Var rand_param(Index r, Index c, unsigned seed) {
  std::srand(seed);
  return ag::parameter(Matrix::Random(r, c));
}

}  // namespace

TEST_CASE("elementwise ops have correct gradients") {
  Var a = rand_param(3, 4, 1), b = rand_param(3, 4, 2);
  auto f = [&] {
    Var t = ag::add(ag::mul(a, b), ag::sub(ag::tanh(a), ag::sigmoid(b)));
    t = ag::add(t, ag::square(ag::scale(b, 0.7)));
    t = ag::add(t, ag::exp(ag::scale(a, 0.3)));
    t = ag::add(t, ag::log_sigmoid(ag::sub(a, b)));
    t = ag::add(t, ag::log(ag::add_scalar(ag::square(a), 1.0)));
    return ag::sum(t);
  };
  CHECK(testing::gradient_check({a, b}, f) < 1e-6);
}

TEST_CASE("matrix ops have correct gradients") {
  Var a = rand_param(3, 4, 3), b = rand_param(4, 2, 4), row = rand_param(1, 2, 5);
  Var c = rand_param(5, 4, 6);
  auto f = [&] {
    Var y = ag::add_row(ag::matmul(a, b), row);
    Var z = ag::matmul(ag::gather_rows(c, {0, 2, 2, 4}), ag::transpose(c));
    Var w = ag::concat_rows(y, ag::slice_cols(z, 1, 2));
    Var v = ag::concat_cols(w, ag::row_dot(w, w));
    return ag::add(ag::mean(ag::logsumexp_rows(v)), ag::sum(ag::diag(ag::matmul(v, ag::transpose(v)))));
  };
  CHECK(testing::gradient_check({a, b, row, c}, f) < 1e-6);
}

TEST_CASE("sparse product, normalization and scalar ops have correct gradients") {
  Matrix d = Matrix::Zero(4, 4);
  d(0, 1) = d(1, 0) = 0.5;
  d(2, 3) = d(3, 2) = 1.0;
  d(1, 2) = d(2, 1) = 0.25;
  const ag::SparseMatrix s = d.sparseView();
  Var x = rand_param(4, 3, 7), k = rand_param(1, 1, 8);
  auto f = [&] {
    Var y = ag::normalize_rows(ag::spmm(s, ag::add_scalar(x, 2.0)));
    return ag::sum(ag::mul_scalar(ag::square(y), k));
  };
  CHECK(testing::gradient_check({x, k}, f) < 1e-6);
}

TEST_CASE("clamp passes gradient only inside the bounds") {
  Matrix m(1, 3);
  m << -5, 0.5, 5;
  Var x = ag::parameter(m);
  ag::backward(ag::sum(ag::clamp(x, -1, 1)));
  CHECK(x.grad()(0, 0) == 0);
  CHECK(x.grad()(0, 1) == 1);
  CHECK(x.grad()(0, 2) == 0);
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  Var x = ag::parameter(Matrix::Constant(1, 1, 3.0));
  Var y = ag::mul(x, x);
  ag::backward(ag::add(y, y));
  CHECK_THAT(x.grad()(0, 0), WithinAbs(12.0, 1e-12));
}

TEST_CASE("log_sigmoid is stable for large inputs") {
  Matrix m(1, 2);
  m << -800, 800;
  const Var y = ag::log_sigmoid(Var(m));
  CHECK_THAT(y.value()(0, 0), WithinAbs(-800, 1e-9));
  CHECK_THAT(y.value()(0, 1), WithinAbs(0, 1e-12));
}

TEST_CASE("adam moves a quadratic toward its minimum") {
  Var w = ag::parameter(Matrix::Constant(1, 2, 5.0));
  nn::NamedParams params{{"w", w}};
  nn::Adam opt(0.1);
  for (int step = 0; step < 500; ++step) {
    ag::backward(ag::sum(ag::square(ag::add_scalar(w, -1.0))));
    opt.step(params);
    nn::Adam::zero_grad(params);
  }
  CHECK((w.value().array() - 1.0).abs().maxCoeff() < 1e-2);
}

TEST_CASE("zero-init linear layers emit zeros") {
  Rng rng(0);
  nn::Linear l(4, 3, rng, true);
  const Var y = l(Var(Matrix::Random(5, 4)));
  CHECK(y.value().isZero(0));
  CHECK(l.in_dim() == 4);
  CHECK(l.out_dim() == 3);
}
