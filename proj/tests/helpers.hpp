#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "fincflow/tensor.hpp"

namespace testutil {

template <typename T>
fincflow::Tensor<T> random_tensor(fincflow::Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  fincflow::Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(normal(rng));
  return t;
}

// Small integers, so sums of products stay exact in floating point.
template <typename T>
fincflow::Tensor<T> integer_tensor(fincflow::Shape s, std::uint64_t seed, int lo = -4, int hi = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(lo, hi);
  fincflow::Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fincflow_" + tag + "_" + std::to_string(rd()));
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

}  // namespace testutil
