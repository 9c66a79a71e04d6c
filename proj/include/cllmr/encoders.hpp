#pragma once

// Side-information encoders.
//
// SseEncoder is an identifiable VAE whose factorial Gaussian prior is
// conditioned on the node's spectral vector m:
//
//   prior      p(z | m)    = N(mu_p(m), diag exp(lv_p(m)))
//   posterior  q(z | x, m) = N(mu_q(x, m), diag exp(lv_q(x, m)))
//   likelihood p(x | z)    = N(f(z), sigma^2 I), sigma learnable
//
// The side representation is the posterior mean. BaselineEncoder is a plain
// two-layer MLP with no conditioner and no likelihood.

#include <cmath>
#include <memory>
#include <string>

#include "autograd.hpp"
#include "common.hpp"
#include "nn.hpp"

namespace cllmr::encoders {

using ag::Var;

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct GaussianParams {
  Vector mean;
  Vector log_variance;
};

// Batched parameters, one row per node.
struct GaussianBatch {
  Var mean;
  Var log_variance;
};

// Per-row KL(q || p) between diagonal Gaussians, as an n x 1 column.
inline Var kl_diag_gaussian(const GaussianBatch& q, const GaussianBatch& p) {
  Var diff = ag::sub(q.mean, p.mean);
  Var t = ag::sub(p.log_variance, q.log_variance);
  t = ag::add(t, ag::exp(ag::sub(q.log_variance, p.log_variance)));
  t = ag::add(t, ag::mul(ag::square(diff), ag::exp(ag::scale(p.log_variance, -1.0))));
  t = ag::add_scalar(t, -1.0);
  return ag::scale(ag::row_sum(t), 0.5);
}

struct ElboTerms {
  Var reconstruction;  // 1x1, mean over rows
  Var kl;              // 1x1, mean over rows
  Var total;           // reconstruction + kl
};

class SideEncoder {
 public:
  virtual ~SideEncoder() = default;
  // Side representation for a batch of (x, m) rows.
  virtual Var represent(const Var& x, const Var& m) const = 0;
  virtual bool has_elbo() const { return false; }
  virtual ElboTerms negative_elbo(const Var& x, const Var& m, int samples, Rng& rng) const;
  virtual nn::NamedParams parameters() const = 0;
  virtual std::string kind() const = 0;
  virtual std::unique_ptr<SideEncoder> clone() const = 0;

  Index input_dim() const { return input_dim_; }
  Index conditioner_dim() const { return conditioner_dim_; }
  Index latent_dim() const { return latent_dim_; }

  Vector represent(const Vector& x, const Vector& m) const {
    Var xs(x.transpose(), false), ms(m.transpose(), false);
    return represent(xs, ms).value().row(0).transpose();
  }
  Matrix represent(const Matrix& x, const Matrix& m) const {
    return represent(Var(x, false), Var(m, false)).value();
  }

 protected:
  Index input_dim_ = 0, conditioner_dim_ = 0, latent_dim_ = 0;

  void check_batch(const Var& x, const Var& m) const {
    require_shape(x.cols() == input_dim_, "encoder input has " + std::to_string(x.cols()) + " columns, expected " +
                                              std::to_string(input_dim_));
    require_shape(m.cols() == conditioner_dim_, "conditioner has " + std::to_string(m.cols()) +
                                                    " columns, expected " + std::to_string(conditioner_dim_));
    require_shape(x.rows() == m.rows(), "encoder input and conditioner row counts differ");
  }
};

inline ElboTerms SideEncoder::negative_elbo(const Var&, const Var&, int, Rng&) const {
  throw Error(kind() + " encoder has no likelihood");
}

struct SseConfig {
  Index input_dim = 64;
  Index conditioner_dim = 32;
  Index latent_dim = 32;
  Index hidden = 128;
  // Zero output layers make every head emit N(0, I) and the decoder emit 0.
  bool zero_init_heads = false;
  double init_observation_noise = 1.0;
};

class SseEncoder final : public SideEncoder {
 public:
  using SideEncoder::represent;
  SseEncoder(const SseConfig& cfg, Rng& rng) {
    if (cfg.input_dim < 1 || cfg.conditioner_dim < 1 || cfg.latent_dim < 1 || cfg.hidden < 1)
      throw ParameterError("encoder dimensions must be positive");
    if (!(cfg.init_observation_noise > 0)) throw ParameterError("observation noise must be positive");
    input_dim_ = cfg.input_dim;
    conditioner_dim_ = cfg.conditioner_dim;
    latent_dim_ = cfg.latent_dim;
    enc_hidden_ = nn::Linear(cfg.input_dim + cfg.conditioner_dim, cfg.hidden, rng);
    enc_out_ = nn::Linear(cfg.hidden, 2 * cfg.latent_dim, rng, cfg.zero_init_heads);
    prior_hidden_ = nn::Linear(cfg.conditioner_dim, cfg.hidden, rng);
    prior_out_ = nn::Linear(cfg.hidden, 2 * cfg.latent_dim, rng, cfg.zero_init_heads);
    dec_hidden_ = nn::Linear(cfg.latent_dim, cfg.hidden, rng);
    dec_out_ = nn::Linear(cfg.hidden, cfg.input_dim, rng, cfg.zero_init_heads);
    log_obs_noise_ = ag::parameter(Matrix::Constant(1, 1, std::log(cfg.init_observation_noise)));
  }

  GaussianBatch prior(const Var& m) const {
    require_shape(m.cols() == conditioner_dim_, "conditioner has " + std::to_string(m.cols()) +
                                                    " columns, expected " + std::to_string(conditioner_dim_));
    return split_head(prior_out_(ag::tanh(prior_hidden_(m))));
  }

  GaussianBatch encode(const Var& x, const Var& m) const {
    check_batch(x, m);
    return split_head(enc_out_(ag::tanh(enc_hidden_(ag::concat_cols(x, m)))));
  }

  Var decode(const Var& z) const { return dec_out_(ag::tanh(dec_hidden_(z))); }

  GaussianParams prior(const Vector& m) const { return to_params(prior(Var(m.transpose(), false))); }
  GaussianParams encode(const Vector& x, const Vector& m) const {
    return to_params(encode(Var(x.transpose(), false), Var(m.transpose(), false)));
  }

  Var represent(const Var& x, const Var& m) const override { return encode(x, m).mean; }
  bool has_elbo() const override { return true; }

  // Reconstruction: E_q[ ||x - f(z)||^2 / (2 sigma^2) ] + D log sigma, by
  // reparameterized sampling; KL in closed form. Both are row means.
  ElboTerms negative_elbo(const Var& x, const Var& m, int samples, Rng& rng) const override {
    if (samples < 1) throw ParameterError("sample_count must be >= 1");
    const GaussianBatch q = encode(x, m);
    const GaussianBatch p = prior(m);
    return negative_elbo_from(x, q, p, samples, rng);
  }

  ElboTerms negative_elbo_from(const Var& x, const GaussianBatch& q, const GaussianBatch& p, int samples,
                               Rng& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    const Var stddev = ag::exp(ag::scale(q.log_variance, 0.5));
    Var sq_err;
    for (int s = 0; s < samples; ++s) {
      Matrix eps(q.mean.rows(), q.mean.cols());
      for (Eigen::Index c = 0; c < eps.cols(); ++c)
        for (Eigen::Index r = 0; r < eps.rows(); ++r) eps(r, c) = normal(rng);
      Var z = ag::add(q.mean, ag::mul(stddev, Var(std::move(eps), false)));
      Var err = ag::mean(ag::row_sum(ag::square(ag::sub(x, decode(z)))));
      sq_err = sq_err.defined() ? ag::add(sq_err, err) : err;
    }
    sq_err = ag::scale(sq_err, 1.0 / samples);
    const Var inv_two_var = ag::scale(ag::exp(ag::scale(log_obs_noise_, -2.0)), 0.5);
    Var recon = ag::add(ag::mul_scalar(sq_err, inv_two_var),
                        ag::scale(log_obs_noise_, static_cast<double>(input_dim_)));
    Var kl = ag::mean(kl_diag_gaussian(q, p));
    return {recon, kl, ag::add(recon, kl)};
  }

  double observation_noise() const { return std::exp(log_obs_noise_.item()); }

  // Numerical rank of the decoder's first layer; full rank (= latent dim) is
  // the observable proxy for an injective decoder.
  Index decoder_rank(double rel_tol = 1e-8) const {
    Eigen::JacobiSVD<Matrix> svd(dec_hidden_.weight.value());
    const Vector s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0) return 0;
    Index r = 0;
    for (Eigen::Index k = 0; k < s.size(); ++k) r += s(k) > rel_tol * s(0);
    return r;
  }

  nn::NamedParams parameters() const override {
    nn::NamedParams out;
    enc_hidden_.collect("sse.encoder.hidden", out);
    enc_out_.collect("sse.encoder.out", out);
    prior_hidden_.collect("sse.prior.hidden", out);
    prior_out_.collect("sse.prior.out", out);
    dec_hidden_.collect("sse.decoder.hidden", out);
    dec_out_.collect("sse.decoder.out", out);
    out.emplace_back("sse.log_observation_noise", log_obs_noise_);
    return out;
  }

  std::string kind() const override { return "sse"; }

  std::unique_ptr<SideEncoder> clone() const override {
    auto c = std::unique_ptr<SseEncoder>(new SseEncoder(*this));
    c->deep_copy_params();
    return c;
  }

 private:
  nn::Linear enc_hidden_, enc_out_, prior_hidden_, prior_out_, dec_hidden_, dec_out_;
  Var log_obs_noise_;

  GaussianBatch split_head(const Var& h) const {
    return {ag::slice_cols(h, 0, latent_dim_),
            ag::clamp(ag::slice_cols(h, latent_dim_, latent_dim_), kLogVarMin, kLogVarMax)};
  }

  static GaussianParams to_params(const GaussianBatch& b) {
    return {b.mean.value().row(0).transpose(), b.log_variance.value().row(0).transpose()};
  }

  void deep_copy_params() {
    for (nn::Linear* l : {&enc_hidden_, &enc_out_, &prior_hidden_, &prior_out_, &dec_hidden_, &dec_out_}) {
      l->weight = ag::parameter(l->weight.value());
      l->bias = ag::parameter(l->bias.value());
    }
    log_obs_noise_ = ag::parameter(log_obs_noise_.value());
  }
};

struct BaselineConfig {
  Index input_dim = 64;
  Index conditioner_dim = 0;  // accepted and ignored
  Index latent_dim = 32;
  Index hidden = 128;
  bool zero_init_heads = false;
};

class BaselineEncoder final : public SideEncoder {
 public:
  using SideEncoder::represent;
  BaselineEncoder(const BaselineConfig& cfg, Rng& rng) {
    if (cfg.input_dim < 1 || cfg.latent_dim < 1 || cfg.hidden < 1)
      throw ParameterError("encoder dimensions must be positive");
    input_dim_ = cfg.input_dim;
    conditioner_dim_ = cfg.conditioner_dim;
    latent_dim_ = cfg.latent_dim;
    hidden_ = nn::Linear(cfg.input_dim, cfg.hidden, rng);
    out_ = nn::Linear(cfg.hidden, cfg.latent_dim, rng, cfg.zero_init_heads);
  }

  Var represent(const Var& x, const Var&) const override {
    require_shape(x.cols() == input_dim_, "encoder input has " + std::to_string(x.cols()) + " columns, expected " +
                                              std::to_string(input_dim_));
    return out_(ag::tanh(hidden_(x)));
  }
  Vector encode(const Vector& x) const { return represent(Var(x.transpose(), false), Var()).value().row(0).transpose(); }

  nn::NamedParams parameters() const override {
    nn::NamedParams out;
    hidden_.collect("baseline.hidden", out);
    out_.collect("baseline.out", out);
    return out;
  }
  std::string kind() const override { return "baseline"; }

  std::unique_ptr<SideEncoder> clone() const override {
    auto c = std::unique_ptr<BaselineEncoder>(new BaselineEncoder(*this));
    for (nn::Linear* l : {&c->hidden_, &c->out_}) {
      l->weight = ag::parameter(l->weight.value());
      l->bias = ag::parameter(l->bias.value());
    }
    return c;
  }

 private:
  nn::Linear hidden_, out_;
};

// Closed-form KL between two diagonal Gaussians given as vectors.
inline double kl_divergence(const GaussianParams& q, const GaussianParams& p) {
  Var v = kl_diag_gaussian({Var(q.mean.transpose()), Var(q.log_variance.transpose())},
                           {Var(p.mean.transpose()), Var(p.log_variance.transpose())});
  return v.item();
}

}  // namespace cllmr::encoders
