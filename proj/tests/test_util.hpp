#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "cracknet/random.hpp"
#include "cracknet/tensor.hpp"

namespace testutil {

using cracknet::Shape;
using TensorD = cracknet::Tensor<double>;

inline std::vector<double> uniform_values(std::int64_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  cracknet::Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline TensorD rand_tensor(const Shape& shape, std::uint64_t seed, bool grad = false, double lo = -1.0,
                           double hi = 1.0) {
  return TensorD(shape, uniform_values(cracknet::numel(shape), seed, lo, hi), grad);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
std::vector<double> as_vec(const cracknet::Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

// Fresh per-process scratch directory.
inline std::string temp_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  const auto p = fs::temp_directory_path() / ("cracknet_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace testutil
