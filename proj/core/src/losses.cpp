#include "cracknet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cracknet/ops.hpp"

namespace cracknet::losses {

namespace {
using i64 = std::int64_t;

template <typename T>
void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": prediction " + shape_str(a.shape()) + " vs target " +
                         shape_str(b.shape()));
  }
}
}  // namespace

const std::vector<std::string>& loss_names() {
  static const std::vector<std::string> names = {"bce", "dice", "combine1", "combine2", "lovasz"};
  return names;
}

std::string loss_name(LossKind kind) { return loss_names()[static_cast<std::size_t>(kind)]; }

LossKind parse_loss(const std::string& name) {
  const auto& names = loss_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<LossKind>(i);
  throw ConfigError("unknown loss '" + name + "' (valid: bce, dice, combine1, combine2, lovasz)");
}

LossSpec LossSpec::of(LossKind kind) {
  switch (kind) {
    case LossKind::Bce: return {kind, 1.0, 0.0};
    case LossKind::Dice: return {kind, 0.0, 1.0};
    case LossKind::Combine1: return {kind, 0.5, 1.0};
    case LossKind::Combine2: return {kind, 1.0, 1.0};
    case LossKind::Lovasz: return {kind, 0.0, 0.0};
  }
  return {};
}

void LossSpec::validate() const {
  const LossSpec ref = of(kind);
  if (bce_weight != ref.bce_weight || dice_weight != ref.dice_weight) {
    throw ConfigError("loss " + loss_name(kind) + " requires weights (bce " + std::to_string(ref.bce_weight) +
                      ", dice " + std::to_string(ref.dice_weight) + ")");
  }
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true) {
  same_shape(y_pred, y_true, "bce_loss");
  const auto p = y_pred.values();
  const auto y = y_true.values();
  const std::size_t n = p.size();
  if (n == 0) throw DimensionError("bce_loss: empty input");
  const double lo = kBceClamp, hi = 1.0 - kBceClamp;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
    total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result<T>("bce", Shape{}, {static_cast<T>(total * inv_n)}, {y_pred, y_true}, [n, lo, hi, inv_n](Node<T>& node) {
    const double g = node.grad[0] * inv_n;
    const auto& pv = node.parents[0]->value;
    const auto& yv = node.parents[1]->value;
    T* gp = node.parent_grad(0);
    T* gy = node.parent_grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = pv[i];
      const double pc = std::clamp(raw, lo, hi);
      if (gp && raw > lo && raw < hi) gp[i] += static_cast<T>(g * (-yv[i] / pc + (1.0 - yv[i]) / (1.0 - pc)));
      if (gy) gy[i] += static_cast<T>(g * (std::log(1.0 - pc) - std::log(pc)));
    }
  });
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true) {
  same_shape(y_pred, y_true, "dice_loss");
  const auto p = y_pred.values();
  const auto y = y_true.values();
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * y[i];
    total += static_cast<double>(p[i]) + y[i];
  }
  const double num = 2.0 * inter + kDiceSmooth;
  const double den = total + kDiceSmooth;
  const std::size_t n = p.size();
  return make_result<T>("dice", Shape{}, {static_cast<T>(1.0 - num / den)}, {y_pred, y_true}, [n, num, den](Node<T>& node) {
    const double g = node.grad[0];
    const auto& pv = node.parents[0]->value;
    const auto& yv = node.parents[1]->value;
    T* gp = node.parent_grad(0);
    T* gy = node.parent_grad(1);
    const double d2 = den * den;
    for (std::size_t i = 0; i < n; ++i) {
      if (gp) gp[i] += static_cast<T>(-g * (2.0 * yv[i] * den - num) / d2);
      if (gy) gy[i] += static_cast<T>(-g * (2.0 * pv[i] * den - num) / d2);
    }
  });
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true, const LossSpec& spec) {
  if (spec.kind == LossKind::Lovasz) throw ConfigError("combined_loss does not cover the lovasz loss");
  same_shape(y_pred, y_true, "combined_loss");
  Tensor<T> out;
  if (spec.bce_weight != 0.0) out = ops::scale(bce_loss(y_pred, y_true), static_cast<T>(spec.bce_weight));
  if (spec.dice_weight != 0.0) {
    auto d = ops::scale(dice_loss(y_pred, y_true), static_cast<T>(spec.dice_weight));
    out = out.defined() ? ops::add(out, d) : d;
  }
  if (!out.defined()) out = Tensor<T>::scalar(T(0));
  return out;
}

template <typename T>
Tensor<T> lovasz_loss(const Tensor<T>& logits, const Tensor<T>& y_true) {
  same_shape(logits, y_true, "lovasz_loss");
  if (logits.rank() < 1 || logits.size() == 0) throw DimensionError("lovasz_loss: empty input");
  const i64 batch = logits.rank() == 1 ? 1 : logits.dim(0);
  const i64 per = logits.size() / batch;
  const auto l = logits.values();
  const auto y = y_true.values();

  // weight[i]: d loss_b / d relu(error_i), i.e. the Jaccard gradient at i's rank
  std::vector<double> weight(static_cast<std::size_t>(logits.size()));
  std::vector<double> errors(weight.size());
  double total = 0.0;
  std::vector<i64> order(static_cast<std::size_t>(per));
  for (i64 b = 0; b < batch; ++b) {
    const i64 off = b * per;
    double positives = 0.0;
    for (i64 i = 0; i < per; ++i) {
      const double sign = 2.0 * y[off + i] - 1.0;
      errors[off + i] = 1.0 - static_cast<double>(l[off + i]) * sign;
      positives += y[off + i];
    }
    std::iota(order.begin(), order.end(), i64{0});
    std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 c) { return errors[off + a] > errors[off + c]; });
    double cum_pos = 0.0, cum_neg = 0.0, prev = 0.0;
    for (i64 k = 0; k < per; ++k) {
      const i64 i = off + order[k];
      if (y[i] > 0.5) cum_pos += 1.0; else cum_neg += 1.0;
      const double jaccard = 1.0 - (positives - cum_pos) / (positives + cum_neg);
      weight[i] = jaccard - prev;
      prev = jaccard;
      total += std::max(errors[i], 0.0) * weight[i];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return make_result<T>("lovasz", Shape{}, {static_cast<T>(total * inv_b)}, {logits, y_true},
                        [weight = std::move(weight), errors = std::move(errors), inv_b](Node<T>& node) {
                          T* gl = node.parent_grad(0);
                          if (!gl) return;
                          const double g = node.grad[0] * inv_b;
                          const auto& yv = node.parents[1]->value;
                          for (std::size_t i = 0; i < weight.size(); ++i) {
                            if (errors[i] <= 0.0) continue;
                            const double sign = 2.0 * yv[i] - 1.0;
                            gl[i] += static_cast<T>(-g * weight[i] * sign);
                          }
                        });
}

template <typename T>
Tensor<T> loss_from_logits(const Tensor<T>& logits, const Tensor<T>& y_true, const LossSpec& spec) {
  if (spec.kind == LossKind::Lovasz) return lovasz_loss(logits, y_true);
  return combined_loss(ops::sigmoid(logits), y_true, spec);
}

#define CRACKNET_INSTANTIATE_LOSSES(T)                                                      \
  template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> combined_loss(const Tensor<T>&, const Tensor<T>&, const LossSpec&);    \
  template Tensor<T> lovasz_loss(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> loss_from_logits(const Tensor<T>&, const Tensor<T>&, const LossSpec&);

CRACKNET_INSTANTIATE_LOSSES(float)
CRACKNET_INSTANTIATE_LOSSES(double)

}  // namespace cracknet::losses
