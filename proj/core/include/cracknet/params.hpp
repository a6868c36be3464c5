#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cracknet/random.hpp"
#include "cracknet/tensor.hpp"

namespace cracknet {

enum class Init {
  Zeros,
  Ones,
  TruncNormal,  // std 0.02, clipped at two std
  HeUniform,    // U(-sqrt(6/fan_in), sqrt(6/fan_in))
};

// Ordered, uniquely named set of trainable leaves. Creation order is the
// checkpoint order and the initialization order, so equal seeds give
// bitwise-equal parameters.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<T> create(const std::string& name, Shape shape, Init init, std::int64_t fan_in = 0);
  // Fills every element with `value` (e.g. per-head sigma).
  Tensor<T> create_constant(const std::string& name, Shape shape, T value);

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::int64_t param_count() const;
  void zero_grad();

 private:
  Tensor<T>& add(const std::string& name, Tensor<T> t);

  Rng rng_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace cracknet
