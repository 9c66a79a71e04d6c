#pragma once

// Counterfactual inference, full-ranking evaluation and collapse diagnostics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "common.hpp"

namespace cllmr::inferencer {

enum class InferenceMode { counterfactual, factual };

// subtract_gate: e~ = e - alpha * g (default).
// subtract_gated: e~ = e - alpha * (g ⊙ e^), kept for sensitivity analysis.
enum class DebiasMode { subtract_gate, subtract_gated };

struct InferenceConfig {
  double alpha = 0.5;
  std::vector<Index> n_list{10, 30, 50};
  InferenceMode mode = InferenceMode::counterfactual;
  DebiasMode debias = DebiasMode::subtract_gate;

  void validate() const {
    if (!(alpha >= 0)) throw ParameterError("inference.alpha must be >= 0");
    if (n_list.empty()) throw ParameterError("inference.n_list must not be empty");
    for (Index n : n_list)
      if (n < 1) throw ParameterError("inference.n_list entries must be >= 1");
  }
};

inline nlohmann::json to_json(const InferenceConfig& c) {
  return {{"alpha", c.alpha},
          {"n_list", c.n_list},
          {"mode", c.mode == InferenceMode::counterfactual ? "counterfactual" : "factual"},
          {"debias_mode", c.debias == DebiasMode::subtract_gate ? "gate" : "gated"}};
}

inline Vector debias(const Vector& e, const Vector& g, double alpha) {
  require_shape(e.size() == g.size(), "debias operands differ in dim");
  if (!(alpha >= 0)) throw ParameterError("alpha must be >= 0");
  return e - alpha * g;
}

// Row-wise counterfactual tables. collab is only read in subtract_gated mode.
inline Matrix debias(const Matrix& gated, const Matrix& gate, const Matrix& collab, double alpha, DebiasMode mode) {
  require_shape(gated.rows() == gate.rows() && gated.cols() == gate.cols(), "debias tables");
  if (!(alpha >= 0)) throw ParameterError("alpha must be >= 0");
  if (mode == DebiasMode::subtract_gate) return gated - alpha * gate;
  require_shape(collab.rows() == gate.rows() && collab.cols() == gate.cols(), "debias collab table");
  return gated - alpha * gate.cwiseProduct(collab);
}

// Ordering: score descending, then item index ascending.
inline std::vector<Index> top_n(const Vector& scores, const std::vector<Index>& exclude_sorted, Index n) {
  std::vector<Index> cand;
  cand.reserve(static_cast<std::size_t>(scores.size()));
  for (Index i = 0; i < scores.size(); ++i)
    if (!std::binary_search(exclude_sorted.begin(), exclude_sorted.end(), i)) cand.push_back(i);
  auto better = [&](Index a, Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  };
  const auto k = static_cast<std::ptrdiff_t>(std::min<std::size_t>(cand.size(), static_cast<std::size_t>(std::max<Index>(n, 0))));
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), better);
  cand.resize(static_cast<std::size_t>(k));
  return cand;
}

inline std::vector<Index> rank_items(const Vector& user, const Matrix& items, std::vector<Index> exclude) {
  require_shape(user.size() == items.cols(), "user vector vs item table");
  std::sort(exclude.begin(), exclude.end());
  const Vector scores = items * user;
  return top_n(scores, exclude, scores.size());
}

inline double recall_at_n(const std::vector<Index>& ranked, const std::vector<Index>& relevant, Index n) {
  if (n < 1) throw MetricError("N must be >= 1");
  if (relevant.empty()) throw MetricError("relevant set is empty");
  std::vector<Index> rel(relevant);
  std::sort(rel.begin(), rel.end());
  rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
  std::size_t hits = 0;
  const std::size_t lim = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < lim; ++p) hits += std::binary_search(rel.begin(), rel.end(), ranked[p]);
  return static_cast<double>(hits) / static_cast<double>(rel.size());
}

inline double ndcg_at_n(const std::vector<Index>& ranked, const std::vector<Index>& relevant, Index n) {
  if (n < 1) throw MetricError("N must be >= 1");
  if (relevant.empty()) throw MetricError("relevant set is empty");
  std::vector<Index> rel(relevant);
  std::sort(rel.begin(), rel.end());
  rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
  double dcg = 0.0, idcg = 0.0;
  const std::size_t lim = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < lim; ++p)
    if (std::binary_search(rel.begin(), rel.end(), ranked[p])) dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  const std::size_t ideal = std::min<std::size_t>(rel.size(), static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < ideal; ++p) idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  return dcg / idcg;
}

// Relative improvement of best over runner_up, in percent.
inline double improvement(double best, double runner_up) {
  if (!(runner_up > 0)) throw ParameterError("runner-up value must be positive");
  return (best - runner_up) / runner_up * 100.0;
}

struct UserMetrics {
  Index user = 0;
  std::vector<double> recall;  // aligned with n_list
  std::vector<double> ndcg;
};

struct RankingReport {
  InferenceConfig config;
  std::map<Index, double> recall;
  std::map<Index, double> ndcg;
  std::vector<UserMetrics> per_user;
  Index users_evaluated = 0;
  Index users_skipped = 0;
  double runtime_seconds = 0.0;  // not serialized; reports must be reproducible byte for byte
};

inline nlohmann::json to_json(const RankingReport& r) {
  nlohmann::json j;
  j["config"] = to_json(r.config);
  nlohmann::json rec = nlohmann::json::object(), nd = nlohmann::json::object();
  for (const auto& [n, v] : r.recall) rec["recall@" + std::to_string(n)] = v;
  for (const auto& [n, v] : r.ndcg) nd["ndcg@" + std::to_string(n)] = v;
  j["recall"] = rec;
  j["ndcg"] = nd;
  j["users_evaluated"] = r.users_evaluated;
  j["users_skipped"] = r.users_skipped;
  nlohmann::json users = nlohmann::json::array();
  for (const auto& u : r.per_user) users.push_back({{"user", u.user}, {"recall", u.recall}, {"ndcg", u.ndcg}});
  j["per_user"] = users;
  return j;
}

// Scores every user against every item with the given tables, excluding each
// user's exclude set, and averages Recall@N / NDCG@N over users whose relevant
// set is nonempty.
inline RankingReport evaluate(const Matrix& user_table, const Matrix& item_table,
                              const std::vector<std::vector<Index>>& relevant,
                              const std::vector<std::vector<Index>>& exclude, const InferenceConfig& cfg) {
  cfg.validate();
  require_shape(user_table.cols() == item_table.cols(), "user vs item table dims");
  require_shape(static_cast<Index>(relevant.size()) == user_table.rows() &&
                    static_cast<Index>(exclude.size()) == user_table.rows(),
                "relevant/exclude lists must cover every user");
  const auto t0 = std::chrono::steady_clock::now();
  RankingReport rep;
  rep.config = cfg;
  const Index max_n = *std::max_element(cfg.n_list.begin(), cfg.n_list.end());
  std::vector<double> rsum(cfg.n_list.size(), 0.0), nsum(cfg.n_list.size(), 0.0);
  for (Index u = 0; u < user_table.rows(); ++u) {
    const auto& rel = relevant[static_cast<std::size_t>(u)];
    if (rel.empty()) {
      ++rep.users_skipped;
      continue;
    }
    std::vector<Index> ex = exclude[static_cast<std::size_t>(u)];
    std::sort(ex.begin(), ex.end());
    const Vector scores = item_table * user_table.row(u).transpose();
    const auto ranked = top_n(scores, ex, max_n);
    UserMetrics um;
    um.user = u;
    for (std::size_t k = 0; k < cfg.n_list.size(); ++k) {
      um.recall.push_back(recall_at_n(ranked, rel, cfg.n_list[k]));
      um.ndcg.push_back(ndcg_at_n(ranked, rel, cfg.n_list[k]));
      rsum[k] += um.recall.back();
      nsum[k] += um.ndcg.back();
    }
    rep.per_user.push_back(std::move(um));
    ++rep.users_evaluated;
  }
  for (std::size_t k = 0; k < cfg.n_list.size(); ++k) {
    const double d = rep.users_evaluated ? static_cast<double>(rep.users_evaluated) : 1.0;
    rep.recall[cfg.n_list[k]] = rsum[k] / d;
    rep.ndcg[cfg.n_list[k]] = nsum[k] / d;
  }
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---- collapse diagnostics ------------------------------------------------------

struct SpectrumDiagnostics {
  Vector singular_values;  // nonincreasing
  double effective_rank = 1.0;
  double collapse_threshold = 0.25;
  bool collapsed = false;  // effective_rank < threshold * dim
};

// exp(entropy) of the normalized singular values. An all-zero table has
// effective rank 1 by convention.
inline double effective_rank(const Vector& singular_values) {
  const double total = singular_values.sum();
  if (!(total > 0)) return 1.0;
  double h = 0.0;
  for (Eigen::Index k = 0; k < singular_values.size(); ++k) {
    const double p = singular_values(k) / total;
    if (p > 0) h -= p * std::log(p);
  }
  return std::max(1.0, std::exp(h));
}

inline SpectrumDiagnostics singular_spectrum(const Matrix& table, double collapse_threshold = 0.25) {
  if (table.rows() == 0 || table.cols() == 0) throw ParameterError("singular_spectrum needs a nonempty table");
  SpectrumDiagnostics d;
  Eigen::BDCSVD<Matrix> svd(table);
  d.singular_values = svd.singularValues();
  d.effective_rank = effective_rank(d.singular_values);
  d.collapse_threshold = collapse_threshold;
  d.collapsed = d.effective_rank < collapse_threshold * static_cast<double>(table.cols());
  return d;
}

inline nlohmann::json to_json(const SpectrumDiagnostics& d) {
  std::vector<double> sv(d.singular_values.data(), d.singular_values.data() + d.singular_values.size());
  return {{"effective_rank", d.effective_rank},
          {"collapse_threshold", d.collapse_threshold},
          {"collapsed", d.collapsed},
          {"singular_values", sv}};
}

inline std::string spectrum_csv(const SpectrumDiagnostics& d) {
  std::string out = "index,value\n";
  char buf[64];
  for (Eigen::Index k = 0; k < d.singular_values.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g\n", static_cast<long>(k), d.singular_values(k));
    out += buf;
  }
  return out;
}

}  // namespace cllmr::inferencer
