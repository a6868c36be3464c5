#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cracknet {

// Error taxonomy shared by every module. Callers that only care about
// "something went wrong" can catch Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class GeometryError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ContractError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};
class DataError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  // Grad buffer of parent i, or nullptr when that parent is not tracked.
  T* parent_grad(std::size_t i) {
    auto& p = *parents[i];
    return p.requires_grad ? p.grad.data() : nullptr;
  }
};

// Handle to a node of the dynamic computation record. Copies share the node.
//
// Values are immutable once an op has produced them; only leaves may be
// mutated (parameter updates, finite-difference probes). The record reachable
// from a loss is consumed by backward(): running backward a second time on the
// same record throws ContractError instead of accumulating twice.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }
  // Extent of `axis`; negative axes count from the back.
  std::int64_t dim(int axis) const;

  std::span<const T> values() const { return node_->value; }
  // Leaf-only mutable access (optimizer steps, probes, initialization).
  std::span<T> mutable_values();
  T item() const;
  T at(std::int64_t i) const { return node_->value.at(static_cast<std::size_t>(i)); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad();

  void backward() const;

  // Same values, no history, no grad tracking.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds the output of a differentiable op. The backward closure is dropped
// when no input tracks gradients.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward);

// Grad recording is on by default. NoGradGuard disables it for the current
// thread (inference, evaluation).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cracknet
