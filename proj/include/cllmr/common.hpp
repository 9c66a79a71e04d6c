#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace cllmr {

using Index = std::int64_t;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

enum class Side { user, item };

inline const char* to_string(Side side) { return side == Side::user ? "user" : "item"; }

// Every error raised by the library derives from Error so callers (the CLI)
// can report a single category with a readable message.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CLLMR_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

CLLMR_DEFINE_ERROR(ParseError);
CLLMR_DEFINE_ERROR(EmptyDatasetError);
CLLMR_DEFINE_ERROR(SplitError);
CLLMR_DEFINE_ERROR(TemplateError);
CLLMR_DEFINE_ERROR(PromptError);
CLLMR_DEFINE_ERROR(ProviderError);
CLLMR_DEFINE_ERROR(FormatError);
CLLMR_DEFINE_ERROR(CoverageError);
CLLMR_DEFINE_ERROR(RankError);
CLLMR_DEFINE_ERROR(ParameterError);
CLLMR_DEFINE_ERROR(ShapeError);
CLLMR_DEFINE_ERROR(LossError);
CLLMR_DEFINE_ERROR(TrainingError);
CLLMR_DEFINE_ERROR(CheckpointError);
CLLMR_DEFINE_ERROR(MetricError);
CLLMR_DEFINE_ERROR(ConfigError);
CLLMR_DEFINE_ERROR(DependencyError);

#undef CLLMR_DEFINE_ERROR

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError("shape mismatch: " + what);
}

// 64-bit FNV-1a. Used for content hashes (manifests, mock providers); not
// cryptographic.
inline std::uint64_t fnv1a(const std::string& text, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace cllmr
