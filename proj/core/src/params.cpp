#include "cracknet/params.hpp"

#include <cmath>

namespace cracknet {

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> t) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

template <typename T>
Tensor<T> ParamStore<T>::create(const std::string& name, Shape shape, Init init, std::int64_t fan_in) {
  const auto n = static_cast<std::size_t>(numel(shape));
  std::vector<T> values(n, T(0));
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      std::fill(values.begin(), values.end(), T(1));
      break;
    case Init::TruncNormal:
      for (auto& v : values) v = static_cast<T>(rng_.truncated_normal(0.02));
      break;
    case Init::HeUniform: {
      if (fan_in <= 0) throw ContractError("He initialization of " + name + " needs a positive fan-in");
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<T>(rng_.uniform(-bound, bound));
      break;
    }
  }
  return add(name, Tensor<T>(std::move(shape), std::move(values), true));
}

template <typename T>
Tensor<T> ParamStore<T>::create_constant(const std::string& name, Shape shape, T value) {
  return add(name, Tensor<T>::full(std::move(shape), value, true));
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return entries_[it->second].second;
}

template <typename T>
std::int64_t ParamStore<T>::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace cracknet
