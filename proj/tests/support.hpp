#pragma once

// Helpers shared by the unit tests.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <unistd.h>
#include <string>

#include "cllmr/autograd.hpp"
#include "cllmr/dataio.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("cllmr_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline cllmr::dataio::InteractionDataset dataset(const std::string& tsv, double min_rating = 0) {
  std::istringstream in(tsv);
  return cllmr::dataio::parse_interactions(in, min_rating, "fixture");
}

// Train-only dataset over dense indices.
inline cllmr::dataio::InteractionDataset edges(cllmr::Index n_users, cllmr::Index n_items,
                                               const std::vector<std::pair<cllmr::Index, cllmr::Index>>& pairs) {
  cllmr::dataio::InteractionDataset ds;
  ds.n_users = n_users;
  ds.n_items = n_items;
  ds.split = cllmr::dataio::SplitTag::train;
  for (auto [u, i] : pairs) ds.interactions.push_back({u, i, 1.0, std::nullopt});
  return ds;
}

// Largest relative error between the analytic gradient of every parameter and
// central finite differences of f. Relative error uses max(|a|, |n|, floor).
inline double gradient_check(const std::vector<cllmr::ag::Var>& params, const std::function<cllmr::ag::Var()>& f,
                             double step = 1e-5, double floor = 1e-6) {
  using cllmr::ag::Var;
  for (auto p : params) p.zero_grad();
  cllmr::ag::backward(f());
  std::vector<cllmr::Matrix> analytic;
  for (const auto& p : params)
    analytic.push_back(p.grad().size() ? p.grad() : cllmr::Matrix::Zero(p.rows(), p.cols()));
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var h = params[k];
    for (Eigen::Index r = 0; r < h.rows(); ++r)
      for (Eigen::Index c = 0; c < h.cols(); ++c) {
        const double keep = h.value()(r, c);
        h.value()(r, c) = keep + step;
        const double up = f().item();
        h.value()(r, c) = keep - step;
        const double down = f().item();
        h.value()(r, c) = keep;
        const double numeric = (up - down) / (2 * step);
        const double a = analytic[k](r, c);
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        worst = std::max(worst, std::abs(a - numeric) / denom);
      }
  }
  return worst;
}

}  // namespace testing
