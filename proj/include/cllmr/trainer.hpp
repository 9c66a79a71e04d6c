#pragma once

// Factual-world training: propensity gates on the collaborative
// representations, BPR + alignment + negative-ELBO objective, early stopping
// on validation Recall@10, and checkpoint persistence.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "autograd.hpp"
#include "backbone.hpp"
#include "cemb.hpp"
#include "common.hpp"
#include "dataio.hpp"
#include "encoders.hpp"
#include "inferencer.hpp"
#include "nn.hpp"

namespace cllmr::trainer {

using ag::Var;
using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  return fnv1a(tag, 0xcbf29ce484222325ULL ^ (seed * 0x9e3779b97f4a7c15ULL));
}

// ---- gates -----------------------------------------------------------------

struct GateNetwork {
  nn::Linear affine;

  GateNetwork() = default;
  GateNetwork(Index dim, Rng& rng) : affine(dim, dim, rng) {}

  Var operator()(const Var& s) const { return ag::sigmoid(affine(s)); }
  Index dim() const { return affine.out_dim(); }
};

inline Vector gate(const Vector& s, const GateNetwork& net) {
  require_shape(s.size() == net.affine.in_dim(), "side representation vs gate input dim");
  return net(Var(s.transpose(), false)).value().row(0).transpose();
}

inline Vector apply_gate(const Vector& g, const Vector& collab) {
  require_shape(g.size() == collab.size(), "gate vs collaborative dim");
  return g.cwiseProduct(collab);
}

// ---- losses ----------------------------------------------------------------

inline Var bpr_loss(const Var& pos, const Var& neg) {
  if (pos.rows() != neg.rows() || pos.cols() != neg.cols())
    throw LossError("bpr_loss: " + std::to_string(pos.rows()) + " positive vs " + std::to_string(neg.rows()) +
                    " negative scores");
  if (pos.rows() == 0) throw LossError("bpr_loss: empty batch");
  return ag::scale(ag::mean(ag::log_sigmoid(ag::sub(pos, neg))), -1.0);
}

inline double bpr_loss(const std::vector<double>& pos, const std::vector<double>& neg) {
  auto col = [](const std::vector<double>& v) {
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t k = 0; k < v.size(); ++k) m(static_cast<Eigen::Index>(k), 0) = v[k];
    return Var(m);
  };
  if (pos.size() != neg.size())
    throw LossError("bpr_loss: " + std::to_string(pos.size()) + " positive vs " + std::to_string(neg.size()) +
                    " negative scores");
  return bpr_loss(col(pos), col(neg)).item();
}

// cross_pair: softmax over every (e_a, s_v) in the batch.
// literal: denominator sums only the matched pairs (e_v, s_v).
enum class AlignMode { cross_pair, literal };

// Mean over anchors of one side.
inline Var alignment_term(const Var& e, const Var& s, double tau, AlignMode mode) {
  if (e.rows() == 0) throw LossError("alignment_loss: empty batch");
  require_shape(e.rows() == s.rows() && e.cols() == s.cols(), "alignment pairs differ in shape");
  if (!(tau > 0)) throw ParameterError("temperature must be > 0");
  const Var en = ag::normalize_rows(e), sn = ag::normalize_rows(s);
  if (mode == AlignMode::cross_pair) {
    const Var logits = ag::scale(ag::matmul(en, ag::transpose(sn)), 1.0 / tau);
    return ag::mean(ag::sub(ag::logsumexp_rows(logits), ag::diag(logits)));
  }
  const Var matched = ag::scale(ag::row_dot(en, sn), 1.0 / tau);  // n x 1
  return ag::sub(ag::logsumexp_rows(ag::transpose(matched)), ag::mean(matched));
}

inline Var alignment_loss(const Var& e_users, const Var& s_users, const Var& e_items, const Var& s_items, double tau,
                          AlignMode mode = AlignMode::cross_pair) {
  return ag::add(alignment_term(e_users, s_users, tau, mode), alignment_term(e_items, s_items, tau, mode));
}

inline double alignment_loss(const Matrix& e_users, const Matrix& s_users, const Matrix& e_items,
                             const Matrix& s_items, double tau, AlignMode mode = AlignMode::cross_pair) {
  return alignment_loss(Var(e_users), Var(s_users), Var(e_items), Var(s_items), tau, mode).item();
}

// ---- configuration ---------------------------------------------------------

enum class EncoderKind { sse, baseline, none };
enum class ElboMode { joint, pretrain };

inline const char* to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::sse: return "sse";
    case EncoderKind::baseline: return "baseline";
    case EncoderKind::none: return "none";
  }
  return "?";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "sse") return EncoderKind::sse;
  if (s == "baseline") return EncoderKind::baseline;
  if (s == "none") return EncoderKind::none;
  throw ParameterError("unknown encoder kind '" + s + "'");
}

struct ModelConfig {
  Index dim = 32;
  Index layers = 2;
  double init_scale = 0.1;
  EncoderKind encoder = EncoderKind::sse;
  Index hidden = 128;
  bool use_gates = true;
  bool use_alignment = true;
  double init_observation_noise = 1.0;

  void validate() const {
    if (dim < 1) throw ParameterError("model.dim must be >= 1");
    if (layers < 0) throw ParameterError("backbone.layers must be >= 0");
    if (!(init_scale >= 0)) throw ParameterError("backbone.init_scale must be >= 0");
    if (hidden < 1) throw ParameterError("encoder.hidden must be >= 1");
    if (encoder == EncoderKind::none && (use_gates || use_alignment))
      throw ParameterError("gates and alignment need a side-information encoder");
  }
};

struct TrainConfig {
  double lr = 1e-3;
  Index batch_size = 4096;
  double align_weight = 0.1;
  double temperature = 1.0;
  Index max_epochs = 200;
  Index patience = 10;
  std::uint64_t seed = 0;
  AlignMode align_mode = AlignMode::cross_pair;
  ElboMode elbo_mode = ElboMode::joint;
  double elbo_weight = 1.0;
  int elbo_samples = 1;
  Index pretrain_epochs = 50;

  void validate() const {
    if (!(lr > 0)) throw ParameterError("trainer.lr must be > 0");
    if (batch_size < 1) throw ParameterError("trainer.batch_size must be >= 1");
    if (!(align_weight >= 0)) throw ParameterError("trainer.align_weight must be >= 0");
    if (!(temperature > 0)) throw ParameterError("trainer.temperature must be > 0");
    if (max_epochs < 1) throw ParameterError("trainer.max_epochs must be >= 1");
    if (patience < 0) throw ParameterError("trainer.patience must be >= 0");
    if (!(elbo_weight >= 0)) throw ParameterError("trainer.elbo_weight must be >= 0");
    if (elbo_samples < 1) throw ParameterError("trainer.elbo_samples must be >= 1");
    if (pretrain_epochs < 0) throw ParameterError("trainer.pretrain_epochs must be >= 0");
  }
};

inline Json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},
          {"layers", c.layers},
          {"init_scale", c.init_scale},
          {"encoder", to_string(c.encoder)},
          {"hidden", c.hidden},
          {"use_gates", c.use_gates},
          {"use_alignment", c.use_alignment},
          {"init_observation_noise", c.init_observation_noise}};
}

inline Json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"align_weight", c.align_weight},
          {"temperature", c.temperature},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"align_mode", c.align_mode == AlignMode::cross_pair ? "cross_pair" : "literal"},
          {"elbo_mode", c.elbo_mode == ElboMode::joint ? "joint" : "pretrain"},
          {"elbo_weight", c.elbo_weight},
          {"elbo_samples", c.elbo_samples},
          {"pretrain_epochs", c.pretrain_epochs}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.dim = j.at("dim").get<Index>();
  c.layers = j.at("layers").get<Index>();
  c.init_scale = j.at("init_scale").get<double>();
  c.encoder = parse_encoder_kind(j.at("encoder").get<std::string>());
  c.hidden = j.at("hidden").get<Index>();
  c.use_gates = j.at("use_gates").get<bool>();
  c.use_alignment = j.at("use_alignment").get<bool>();
  c.init_observation_noise = j.at("init_observation_noise").get<double>();
  return c;
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<Index>();
  c.align_weight = j.at("align_weight").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.max_epochs = j.at("max_epochs").get<Index>();
  c.patience = j.at("patience").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.align_mode = j.at("align_mode").get<std::string>() == "literal" ? AlignMode::literal : AlignMode::cross_pair;
  c.elbo_mode = j.at("elbo_mode").get<std::string>() == "pretrain" ? ElboMode::pretrain : ElboMode::joint;
  c.elbo_weight = j.at("elbo_weight").get<double>();
  c.elbo_samples = j.at("elbo_samples").get<int>();
  c.pretrain_epochs = j.at("pretrain_epochs").get<Index>();
  return c;
}

// ---- inputs and state ------------------------------------------------------

// Per-node encoder inputs, users first then items.
struct SideInputs {
  Matrix text;         // N x D, embedded profiles
  Matrix conditioner;  // N x k, noisy spectral vectors

  static SideInputs stack(const Matrix& user_text, const Matrix& item_text, const Matrix& user_cond,
                          const Matrix& item_cond) {
    require_shape(user_text.cols() == item_text.cols(), "user vs item text dims");
    require_shape(user_cond.cols() == item_cond.cols(), "user vs item conditioner dims");
    require_shape(user_text.rows() == user_cond.rows() && item_text.rows() == item_cond.rows(),
                  "text vs conditioner row counts");
    SideInputs s;
    s.text.resize(user_text.rows() + item_text.rows(), user_text.cols());
    s.text << user_text, item_text;
    s.conditioner.resize(user_cond.rows() + item_cond.rows(), user_cond.cols());
    s.conditioner << user_cond, item_cond;
    return s;
  }
};

struct TrainingData {
  dataio::Splits splits;
  dataio::NormalizedAdjacency adjacency;
  SideInputs side;

  Index n_users() const { return splits.train.n_users; }
  Index n_items() const { return splits.train.n_items; }
};

// Frozen per-node tables, users first. gate is empty when gates are off, in
// which case gated == collab.
struct Tables {
  Matrix collab;
  Matrix side;
  Matrix gate;
  Matrix gated;
};

struct EpochRecord {
  Index epoch = 0;
  double loss_total = 0, loss_bpr = 0, loss_align = 0, loss_elbo = 0;
  double val_recall10 = 0;
};

class ModelState {
 public:
  ModelConfig model;
  TrainConfig train;
  Index n_users = 0, n_items = 0, input_dim = 0, conditioner_dim = 0;

  Var base;  // E_0
  std::unique_ptr<encoders::SideEncoder> encoder;
  GateNetwork user_gate, item_gate;
  Tables tables;

  Json history = Json::array();
  Index best_epoch = -1;
  Index epochs_run = 0;
  double best_val_recall = 0.0;
  double initial_val_recall = 0.0;

  Index node_count() const { return n_users + n_items; }

  nn::NamedParams parameters() const {
    nn::NamedParams out;
    out.emplace_back("backbone.base", base);
    if (encoder)
      for (auto& p : encoder->parameters()) out.push_back(p);
    if (model.use_gates) {
      user_gate.affine.collect("gate.user", out);
      item_gate.affine.collect("gate.item", out);
    }
    return out;
  }

  std::vector<Matrix> snapshot() const {
    std::vector<Matrix> v;
    for (const auto& [name, p] : parameters()) v.push_back(p.value());
    return v;
  }

  void restore(const std::vector<Matrix>& snap) {
    auto params = parameters();
    require_shape(snap.size() == params.size(), "snapshot size");
    for (std::size_t k = 0; k < snap.size(); ++k) {
      Var h = params[k].second;
      h.value() = snap[k];
    }
  }

  auto user_rows(const Matrix& t) const { return t.topRows(n_users); }
  auto item_rows(const Matrix& t) const { return t.bottomRows(n_items); }
};

inline ModelState make_state(const ModelConfig& mc, const TrainConfig& tc, Index n_users, Index n_items,
                             Index input_dim, Index conditioner_dim) {
  mc.validate();
  tc.validate();
  ModelState st;
  st.model = mc;
  st.train = tc;
  st.n_users = n_users;
  st.n_items = n_items;
  st.input_dim = input_dim;
  st.conditioner_dim = conditioner_dim;
  st.base = ag::parameter(backbone::init_embeddings(n_users, n_items, mc.dim, mc.init_scale,
                                                    derive_seed(tc.seed, "backbone")));
  Rng rng(derive_seed(tc.seed, "encoder"));
  if (mc.encoder == EncoderKind::sse) {
    encoders::SseConfig c;
    c.input_dim = input_dim;
    c.conditioner_dim = conditioner_dim;
    c.latent_dim = mc.dim;
    c.hidden = mc.hidden;
    c.init_observation_noise = mc.init_observation_noise;
    st.encoder = std::make_unique<encoders::SseEncoder>(c, rng);
  } else if (mc.encoder == EncoderKind::baseline) {
    encoders::BaselineConfig c;
    c.input_dim = input_dim;
    c.conditioner_dim = conditioner_dim;
    c.latent_dim = mc.dim;
    c.hidden = mc.hidden;
    st.encoder = std::make_unique<encoders::BaselineEncoder>(c, rng);
  }
  if (mc.use_gates) {
    Rng grng(derive_seed(tc.seed, "gates"));
    st.user_gate = GateNetwork(mc.dim, grng);
    st.item_gate = GateNetwork(mc.dim, grng);
  }
  return st;
}

inline void check_inputs(const ModelState& st, const dataio::NormalizedAdjacency& adj, const SideInputs& side) {
  require_shape(adj.n_users == st.n_users && adj.n_items == st.n_items, "adjacency vs model node counts");
  if (!st.encoder) return;
  require_shape(side.text.rows() == st.node_count() && side.conditioner.rows() == st.node_count(),
                "side inputs must have one row per node");
  require_shape(side.text.cols() == st.input_dim, "side text dim");
  require_shape(side.conditioner.cols() == st.conditioner_dim, "conditioner dim");
}

// Recomputes every frozen table from the current parameters.
inline void refresh(ModelState& st, const dataio::NormalizedAdjacency& adj, const SideInputs& side) {
  check_inputs(st, adj, side);
  st.tables.collab = backbone::propagate(st.base.value(), adj, st.model.layers);
  if (st.encoder)
    st.tables.side = st.encoder->represent(side.text, side.conditioner);
  else
    st.tables.side.resize(0, 0);
  if (st.model.use_gates) {
    Matrix g(st.node_count(), st.model.dim);
    g.topRows(st.n_users) = st.user_gate(Var(Matrix(st.tables.side.topRows(st.n_users)))).value();
    g.bottomRows(st.n_items) = st.item_gate(Var(Matrix(st.tables.side.bottomRows(st.n_items)))).value();
    st.tables.gate = std::move(g);
    st.tables.gated = st.tables.gate.cwiseProduct(st.tables.collab);
  } else {
    st.tables.gate.resize(0, 0);
    st.tables.gated = st.tables.collab;
  }
}

// User and item tables used for scoring under the given inference settings.
// Models without gates have nothing to subtract and score factually.
inline std::pair<Matrix, Matrix> scoring_tables(const ModelState& st, const inferencer::InferenceConfig& cfg) {
  const Matrix& e = st.tables.gated;
  if (cfg.mode == inferencer::InferenceMode::factual || !st.model.use_gates)
    return {Matrix(e.topRows(st.n_users)), Matrix(e.bottomRows(st.n_items))};
  const Matrix cf = inferencer::debias(e, st.tables.gate, st.tables.collab, cfg.alpha, cfg.debias);
  return {Matrix(cf.topRows(st.n_users)), Matrix(cf.bottomRows(st.n_items))};
}

inline std::vector<std::vector<Index>> merge_item_lists(const std::vector<std::vector<Index>>& a,
                                                        const std::vector<std::vector<Index>>& b) {
  std::vector<std::vector<Index>> out(a.size());
  for (std::size_t u = 0; u < a.size(); ++u) {
    out[u] = a[u];
    out[u].insert(out[u].end(), b[u].begin(), b[u].end());
    std::sort(out[u].begin(), out[u].end());
    out[u].erase(std::unique(out[u].begin(), out[u].end()), out[u].end());
  }
  return out;
}

// Factual Recall@10 on the validation split, train items excluded.
inline double validation_recall(const ModelState& st, const dataio::Splits& s) {
  inferencer::InferenceConfig cfg;
  cfg.mode = inferencer::InferenceMode::factual;
  cfg.n_list = {10};
  const auto [u, i] = scoring_tables(st, cfg);
  return inferencer::evaluate(u, i, s.val.items_by_user(), s.train.items_by_user(), cfg).recall.at(10);
}

// Test-split report with train and val items excluded.
inline inferencer::RankingReport evaluate_test(const ModelState& st, const dataio::Splits& s,
                                               const inferencer::InferenceConfig& cfg) {
  const auto [u, i] = scoring_tables(st, cfg);
  return inferencer::evaluate(u, i, s.test.items_by_user(),
                              merge_item_lists(s.train.items_by_user(), s.val.items_by_user()), cfg);
}

// ---- per-batch objective ---------------------------------------------------

struct Batch {
  std::vector<Index> users, positives, negatives;
};

struct LossParts {
  Var total, bpr, align, elbo;  // align / elbo undefined when inactive
};

inline double value_or_zero(const Var& v) { return v.defined() ? v.item() : 0.0; }

inline bool elbo_active(const ModelState& st) {
  return st.encoder && st.encoder->has_elbo() && st.train.elbo_mode == ElboMode::joint && st.train.elbo_weight > 0;
}

inline LossParts batch_loss(const ModelState& st, const dataio::NormalizedAdjacency& adj, const SideInputs& side,
                            const Batch& b, Rng& rng) {
  check_inputs(st, adj, side);
  if (b.users.empty()) throw LossError("empty training batch");
  require_shape(b.users.size() == b.positives.size() && b.users.size() == b.negatives.size(), "batch triple lengths");
  const TrainConfig& tc = st.train;

  std::vector<Index> users(b.users), items(b.positives);
  items.insert(items.end(), b.negatives.begin(), b.negatives.end());
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  auto pos_of = [](const std::vector<Index>& sorted, Index v) {
    return static_cast<Index>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
  };

  std::vector<Index> nodes(users);
  for (Index i : items) nodes.push_back(st.n_users + i);
  const Index nu = static_cast<Index>(users.size()), ni = static_cast<Index>(items.size());
  std::vector<Index> u_local(static_cast<std::size_t>(nu)), i_local(static_cast<std::size_t>(ni));
  std::iota(u_local.begin(), u_local.end(), Index{0});
  std::iota(i_local.begin(), i_local.end(), nu);

  const Var collab_all = backbone::propagate(st.base, adj.matrix, st.model.layers);
  const Var collab = ag::gather_rows(collab_all, nodes);
  Var e = collab, s;
  LossParts out;

  if (st.encoder) {
    Matrix x(static_cast<Eigen::Index>(nodes.size()), side.text.cols());
    Matrix m(static_cast<Eigen::Index>(nodes.size()), side.conditioner.cols());
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      x.row(static_cast<Eigen::Index>(k)) = side.text.row(nodes[k]);
      m.row(static_cast<Eigen::Index>(k)) = side.conditioner.row(nodes[k]);
    }
    const Var xv(std::move(x)), mv(std::move(m));
    if (elbo_active(st)) {
      const auto& sse = dynamic_cast<const encoders::SseEncoder&>(*st.encoder);
      const encoders::GaussianBatch q = sse.encode(xv, mv);
      s = q.mean;
      out.elbo = sse.negative_elbo_from(xv, q, sse.prior(mv), tc.elbo_samples, rng).total;
    } else {
      s = st.encoder->represent(xv, mv);
    }
    if (st.model.use_gates) {
      const Var gu = st.user_gate(ag::gather_rows(s, u_local));
      const Var gi = st.item_gate(ag::gather_rows(s, i_local));
      e = ag::mul(ag::concat_rows(gu, gi), collab);
    }
    if (st.model.use_alignment)
      out.align = alignment_loss(ag::gather_rows(e, u_local), ag::gather_rows(s, u_local),
                                 ag::gather_rows(e, i_local), ag::gather_rows(s, i_local), tc.temperature,
                                 tc.align_mode);
  }

  std::vector<Index> bu, bp, bn;
  bu.reserve(b.users.size());
  for (std::size_t k = 0; k < b.users.size(); ++k) {
    bu.push_back(pos_of(users, b.users[k]));
    bp.push_back(nu + pos_of(items, b.positives[k]));
    bn.push_back(nu + pos_of(items, b.negatives[k]));
  }
  const Var eu = ag::gather_rows(e, bu);
  out.bpr = bpr_loss(ag::row_dot(eu, ag::gather_rows(e, bp)), ag::row_dot(eu, ag::gather_rows(e, bn)));

  out.total = out.bpr;
  if (out.align.defined()) out.total = ag::add(out.total, ag::scale(out.align, tc.align_weight));
  if (out.elbo.defined()) out.total = ag::add(out.total, ag::scale(out.elbo, tc.elbo_weight));
  return out;
}

// ---- fit -------------------------------------------------------------------

inline Json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"loss_total", r.loss_total},
          {"loss_bpr", r.loss_bpr},
          {"loss_align", r.loss_align},
          {"loss_elbo", r.loss_elbo},
          {"val_recall@10", r.val_recall10}};
}

// Uniform over items the user has not interacted with in train.
inline Index sample_negative(const std::vector<Index>& seen_sorted, Index n_items, Rng& rng) {
  std::uniform_int_distribution<Index> pick(0, n_items - 1);
  for (;;) {
    const Index j = pick(rng);
    if (!std::binary_search(seen_sorted.begin(), seen_sorted.end(), j)) return j;
  }
}

namespace detail {

inline void check_finite(double v, Index epoch, const char* what) {
  if (!std::isfinite(v)) throw TrainingError(std::string(what) + " diverged at epoch " + std::to_string(epoch));
}

// ELBO-only warm-up of the SSE over every node.
inline void pretrain_encoder(ModelState& st, const SideInputs& side, Rng& rng) {
  auto* sse = dynamic_cast<encoders::SseEncoder*>(st.encoder.get());
  if (!sse) return;
  const auto params = sse->parameters();
  nn::Adam opt(st.train.lr);
  std::vector<Index> order(static_cast<std::size_t>(st.node_count()));
  for (Index epoch = 0; epoch < st.train.pretrain_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(st.train.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(st.train.batch_size));
      Matrix x(static_cast<Eigen::Index>(end - start), side.text.cols());
      Matrix m(static_cast<Eigen::Index>(end - start), side.conditioner.cols());
      for (std::size_t k = start; k < end; ++k) {
        x.row(static_cast<Eigen::Index>(k - start)) = side.text.row(order[k]);
        m.row(static_cast<Eigen::Index>(k - start)) = side.conditioner.row(order[k]);
      }
      const Var loss = sse->negative_elbo(Var(std::move(x)), Var(std::move(m)), st.train.elbo_samples, rng).total;
      check_finite(loss.item(), epoch, "pretraining loss");
      ag::backward(loss);
      opt.step(params);
      nn::Adam::zero_grad(params);
    }
  }
}

}  // namespace detail

// Trains from scratch and returns the best-validation state. log, when given,
// receives one JSON line per epoch.
inline ModelState fit(const TrainingData& data, const ModelConfig& mc, const TrainConfig& tc,
                      std::ostream* log = nullptr) {
  const auto& train = data.splits.train;
  if (train.interactions.empty()) throw EmptyDatasetError("train split is empty");
  if (data.splits.val.interactions.empty()) throw EmptyDatasetError("validation split is empty");
  const bool has_side = mc.encoder != EncoderKind::none;
  ModelState st = make_state(mc, tc, data.n_users(), data.n_items(), has_side ? data.side.text.cols() : 0,
                             has_side ? data.side.conditioner.cols() : 0);
  refresh(st, data.adjacency, data.side);
  st.initial_val_recall = validation_recall(st, data.splits);

  Rng rng(derive_seed(tc.seed, "train"));
  if (tc.elbo_mode == ElboMode::pretrain && st.encoder) detail::pretrain_encoder(st, data.side, rng);

  const auto params = st.parameters();
  nn::Adam opt(tc.lr);
  const auto seen = train.items_by_user();
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < train.interactions.size(); ++k) {
    const auto& x = train.interactions[k];
    if (static_cast<Index>(seen[static_cast<std::size_t>(x.user)].size()) < train.n_items) order.push_back(k);
  }
  if (order.empty()) throw TrainingError("every train user has interacted with every item; no negatives exist");

  double best = -1.0;
  Index since = 0;
  std::vector<Matrix> best_params = st.snapshot();
  for (Index epoch = 0; epoch < tc.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      Batch b;
      for (std::size_t k = start; k < end; ++k) {
        const auto& x = train.interactions[order[k]];
        b.users.push_back(x.user);
        b.positives.push_back(x.item);
        b.negatives.push_back(sample_negative(seen[static_cast<std::size_t>(x.user)], train.n_items, rng));
      }
      const LossParts loss = batch_loss(st, data.adjacency, data.side, b, rng);
      const double total = loss.total.item();
      detail::check_finite(total, epoch, "training loss");
      const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
      rec.loss_total += w * total;
      rec.loss_bpr += w * loss.bpr.item();
      rec.loss_align += w * value_or_zero(loss.align);
      rec.loss_elbo += w * value_or_zero(loss.elbo);
      ag::backward(loss.total);
      opt.step(params);
      nn::Adam::zero_grad(params);
    }
    refresh(st, data.adjacency, data.side);
    rec.val_recall10 = validation_recall(st, data.splits);
    st.history.push_back(to_json(rec));
    st.epochs_run = epoch + 1;
    if (log) *log << to_json(rec).dump() << '\n';

    if (rec.val_recall10 > best) {
      best = rec.val_recall10;
      st.best_epoch = epoch;
      best_params = st.snapshot();
      since = 0;
    } else if (++since > tc.patience) {
      break;
    }
  }
  st.restore(best_params);
  st.best_val_recall = best;
  refresh(st, data.adjacency, data.side);
  return st;
}

// ---- checkpoints -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "cllmr-checkpoint";

inline std::vector<std::pair<std::string, Matrix>> checkpoint_tensors(const ModelState& st) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (const auto& [name, p] : st.parameters()) out.emplace_back(name, p.value());
  out.emplace_back("table.collab", st.tables.collab);
  if (st.encoder) out.emplace_back("table.side", st.tables.side);
  if (st.model.use_gates) out.emplace_back("table.gate", st.tables.gate);
  out.emplace_back("table.gated", st.tables.gated);
  return out;
}

inline Json manifest(const ModelState& st) {
  Json tensors = Json::array();
  for (const auto& [name, m] : checkpoint_tensors(st))
    tensors.push_back({{"name", name}, {"file", name + ".cemb"}, {"rows", m.rows()}, {"cols", m.cols()}});
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"n_users", st.n_users},
          {"n_items", st.n_items},
          {"input_dim", st.input_dim},
          {"conditioner_dim", st.conditioner_dim},
          {"model", to_json(st.model)},
          {"train", to_json(st.train)},
          {"seeds", {{"train", st.train.seed}}},
          {"best_epoch", st.best_epoch},
          {"epochs_run", st.epochs_run},
          {"best_val_recall@10", st.best_val_recall},
          {"initial_val_recall@10", st.initial_val_recall},
          {"history", st.history},
          {"tensors", tensors}};
}

inline void save_checkpoint(const ModelState& st, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& [name, m] : checkpoint_tensors(st)) cemb::write_dense(dir / (name + ".cemb"), m, cemb::Precision::f64);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  out << manifest(st).dump(2) << '\n';
  if (!out) throw CheckpointError("failed writing " + (dir / "manifest.json").string());
}

inline ModelState load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint manifest missing: " + mpath.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("unreadable checkpoint manifest " + mpath.string() + ": " + e.what());
  }
  try {
    if (j.value("format", std::string()) != kCheckpointFormat)
      throw CheckpointError(mpath.string() + " is not a checkpoint manifest");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    ModelState st = make_state(model_config_from_json(j.at("model")), train_config_from_json(j.at("train")),
                               j.at("n_users").get<Index>(), j.at("n_items").get<Index>(),
                               j.at("input_dim").get<Index>(), j.at("conditioner_dim").get<Index>());
    st.best_epoch = j.at("best_epoch").get<Index>();
    st.epochs_run = j.at("epochs_run").get<Index>();
    st.best_val_recall = j.at("best_val_recall@10").get<double>();
    st.initial_val_recall = j.at("initial_val_recall@10").get<double>();
    st.history = j.at("history");

    std::map<std::string, Matrix> loaded;
    for (const auto& t : j.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const fs::path file = dir / t.at("file").get<std::string>();
      if (!fs::exists(file)) throw CheckpointError("checkpoint tensor missing: " + file.string());
      Matrix m = cemb::read_dense(file, t.at("rows").get<Index>());
      if (m.cols() != t.at("cols").get<Index>()) throw CheckpointError(file.string() + " has the wrong width");
      loaded.emplace(name, std::move(m));
    }
    auto take = [&](const std::string& name) -> Matrix& {
      auto it = loaded.find(name);
      if (it == loaded.end()) throw CheckpointError("checkpoint lacks tensor " + name);
      return it->second;
    };
    for (auto& [name, p] : st.parameters()) {
      Matrix& m = take(name);
      if (m.rows() != p.rows() || m.cols() != p.cols()) throw CheckpointError("tensor " + name + " has the wrong shape");
      Var h = p;
      h.value() = m;
    }
    st.tables.collab = take("table.collab");
    if (st.encoder) st.tables.side = take("table.side");
    if (st.model.use_gates) st.tables.gate = take("table.gate");
    st.tables.gated = take("table.gated");
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest " + mpath.string() + ": " + e.what());
  }
}

}  // namespace cllmr::trainer
