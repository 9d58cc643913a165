#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "advseg/graph.hpp"
#include "advseg/ops.hpp"
#include "advseg/rng.hpp"
#include "advseg/volume.hpp"

namespace testing_support {

using advseg::Index;
using advseg::Shape;
using advseg::Tensor;

template <typename Scalar = double>
Tensor<Scalar> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(nd(rng));
  return t;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Largest mixed error |a - n| / max(|a|, |n|, floor) over every coordinate of
// `x`, comparing `analytic` with central differences of `loss`.
inline double max_fd_error(Tensor<double>& x, const Tensor<double>& analytic, const std::function<double()>& loss,
                           double h = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
  }
  return worst;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("advseg_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Random binary map with roughly `p` positives.
inline advseg::VoxelMap random_mask(const advseg::Extent3& e, double p, std::mt19937_64& rng) {
  advseg::VoxelMap m(e);
  std::bernoulli_distribution b(p);
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace testing_support
