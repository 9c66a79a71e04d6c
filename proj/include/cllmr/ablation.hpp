#pragma once

// Ablation matrix: each variant is a training/inference configuration of the
// same pipeline, differing in encoder, gates, alignment, conditioner noise and
// the counterfactual subtraction.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataio.hpp"
#include "inferencer.hpp"
#include "spectrum.hpp"
#include "trainer.hpp"

namespace cllmr::inferencer {

enum class Variant { full, wo_conf, wo_sse, wo_sign, wo_noise, base, rlmcon_like };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::full,     Variant::wo_conf, Variant::wo_sse,     Variant::wo_sign,
                                         Variant::wo_noise, Variant::base,    Variant::rlmcon_like};
  return v;
}

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::wo_conf: return "wo_conf";
    case Variant::wo_sse: return "wo_sse";
    case Variant::wo_sign: return "wo_sign";
    case Variant::wo_noise: return "wo_noise";
    case Variant::base: return "base";
    case Variant::rlmcon_like: return "rlmcon_like";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : all_variants())
    if (s == to_string(v)) return v;
  std::string names;
  for (Variant v : all_variants()) names += std::string(names.empty() ? "" : ", ") + to_string(v);
  throw ParameterError("unknown variant '" + s + "' (expected one of: " + names + ")");
}

struct VariantSpec {
  trainer::EncoderKind encoder = trainer::EncoderKind::sse;
  bool gates = true;
  bool alignment = true;
  bool alpha_zero = false;
  spectrum::NoiseMode noise_mode = spectrum::NoiseMode::aligned;
  bool zero_noise = false;
};

inline VariantSpec variant_spec(Variant v) {
  VariantSpec s;
  switch (v) {
    case Variant::full: break;
    case Variant::wo_conf: s.alpha_zero = true; break;
    case Variant::wo_sse: s.encoder = trainer::EncoderKind::baseline; break;
    case Variant::wo_sign: s.noise_mode = spectrum::NoiseMode::symmetric; break;
    case Variant::wo_noise: s.zero_noise = true; break;
    case Variant::base:
      s.encoder = trainer::EncoderKind::none;
      s.gates = false;
      s.alignment = false;
      break;
    case Variant::rlmcon_like:
      s.encoder = trainer::EncoderKind::baseline;
      s.gates = false;
      break;
  }
  return s;
}

struct AblationInputs {
  const dataio::Splits* splits = nullptr;
  const dataio::NormalizedAdjacency* adjacency = nullptr;
  Matrix user_text, item_text;
  spectrum::SpectralFactors factors;
};

struct AblationSettings {
  trainer::ModelConfig model;
  trainer::TrainConfig train;
  InferenceConfig inference;
  spectrum::ConditionerOptions conditioners;
  std::uint64_t conditioner_seed = 0;
  double collapse_threshold = 0.25;
};

struct AblationResult {
  Variant variant = Variant::full;
  trainer::ModelState state;
  RankingReport report;
  std::optional<SpectrumDiagnostics> side_spectrum;  // users and items stacked
  SpectrumDiagnostics collab_spectrum;
};

inline std::pair<trainer::ModelConfig, InferenceConfig> apply_variant(Variant v, const trainer::ModelConfig& model,
                                                                     const InferenceConfig& inference) {
  const VariantSpec spec = variant_spec(v);
  trainer::ModelConfig mc = model;
  mc.encoder = spec.encoder;
  mc.use_gates = spec.gates;
  mc.use_alignment = spec.alignment;
  InferenceConfig ic = inference;
  if (spec.alpha_zero) ic.alpha = 0.0;
  return {mc, ic};
}

inline spectrum::ConditionerOptions variant_conditioners(Variant v, spectrum::ConditionerOptions opt) {
  const VariantSpec spec = variant_spec(v);
  opt.mode = spec.noise_mode;
  if (spec.zero_noise) opt.noise_scale = 0.0;
  return opt;
}

inline trainer::TrainingData training_data(Variant v, const AblationInputs& in, const AblationSettings& s) {
  if (!in.splits || !in.adjacency) throw ParameterError("ablation inputs lack splits or adjacency");
  trainer::TrainingData data;
  data.splits = *in.splits;
  data.adjacency = *in.adjacency;
  if (variant_spec(v).encoder != trainer::EncoderKind::none) {
    const auto [cu, ci] = spectrum::build_conditioners(in.factors, variant_conditioners(v, s.conditioners),
                                                       s.conditioner_seed);
    data.side = trainer::SideInputs::stack(in.user_text, in.item_text, cu.noisy, ci.noisy);
  }
  return data;
}

inline AblationResult run_ablation(Variant v, const AblationInputs& in, const AblationSettings& s,
                                   std::ostream* log = nullptr) {
  const auto [mc, ic] = apply_variant(v, s.model, s.inference);
  const trainer::TrainingData data = training_data(v, in, s);
  AblationResult r;
  r.variant = v;
  r.state = trainer::fit(data, mc, s.train, log);
  r.report = trainer::evaluate_test(r.state, data.splits, ic);
  if (r.state.encoder) r.side_spectrum = singular_spectrum(r.state.tables.side, s.collapse_threshold);
  r.collab_spectrum = singular_spectrum(r.state.tables.collab, s.collapse_threshold);
  return r;
}

// Best-epoch losses restricted to the terms the variant actually optimizes.
inline nlohmann::json active_losses(const trainer::ModelState& st) {
  nlohmann::json out = nlohmann::json::object();
  if (st.best_epoch < 0 || st.history.empty()) return out;
  const auto& rec = st.history.at(static_cast<std::size_t>(st.best_epoch));
  out["loss_total"] = rec.at("loss_total");
  out["loss_bpr"] = rec.at("loss_bpr");
  if (st.encoder && st.model.use_alignment) out["loss_align"] = rec.at("loss_align");
  if (trainer::elbo_active(st)) out["loss_elbo"] = rec.at("loss_elbo");
  return out;
}

}  // namespace cllmr::inferencer
