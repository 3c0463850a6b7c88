#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "caps/feature_matrix.hpp"
#include "caps/kernels.hpp"
#include "caps/rng.hpp"

namespace fixtures {

inline caps::FeatureMatrix random_unit_rows(caps::SplitMix64& rng, std::size_t rows,
                                            std::size_t dim) {
  std::vector<float> data(rows * dim);
  for (float& x : data) x = static_cast<float>(rng.normal());
  return caps::normalize_rows(caps::FeatureMatrix(rows, dim, std::move(data)));
}

// Random cache instance: n_classes classes with 1..max_per_class support rows each.
struct Instance {
  caps::FeatureMatrix f, w, img, cap;
  caps::OneHotLabels labels;
};

inline Instance random_instance(std::uint64_t seed, std::size_t max_classes = 5,
                                std::size_t max_per_class = 6, std::size_t max_test = 8,
                                std::size_t dim = 16) {
  caps::SplitMix64 rng(seed);
  const std::size_t n = 1 + rng.below(max_classes);
  const std::size_t t = 1 + rng.below(max_test);
  std::vector<std::size_t> classes;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t per = 1 + rng.below(max_per_class);
    for (std::size_t j = 0; j < per; ++j) classes.push_back(k);
  }
  Instance in;
  in.f = random_unit_rows(rng, t, dim);
  in.w = random_unit_rows(rng, n, dim);
  in.img = random_unit_rows(rng, classes.size(), dim);
  in.cap = random_unit_rows(rng, classes.size(), dim);
  in.labels = caps::build_onehot(classes, n);
  return in;
}

inline caps::HyperParams random_hp(caps::SplitMix64& rng) {
  return {0.1 + 49.9 * rng.uniform(), 1.0 + 49.0 * rng.uniform(), 0.1 + 29.9 * rng.uniform(),
          rng.uniform(), 1.0 + 99.0 * rng.uniform()};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("caps-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
