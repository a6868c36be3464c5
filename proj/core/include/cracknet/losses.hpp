#pragma once

#include <string>
#include <vector>

#include "cracknet/tensor.hpp"

namespace cracknet::losses {

enum class LossKind { Bce, Dice, Combine1, Combine2, Lovasz };

struct LossSpec {
  LossKind kind = LossKind::Combine1;
  double bce_weight = 0.5;
  double dice_weight = 1.0;

  static LossSpec of(LossKind kind);
  void validate() const;  // ConfigError when the weights do not match the kind
};

std::string loss_name(LossKind kind);
LossKind parse_loss(const std::string& name);  // ConfigError listing valid names
const std::vector<std::string>& loss_names();

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

// Mean binary cross-entropy of probabilities against {0,1} targets; the
// probabilities are clamped to [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true);

// 1 - (2 sum(p y) + 1) / (sum p + sum y + 1), pooled over the whole batch.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true);

// bce_weight * bce + dice_weight * dice. Only meaningful for the BCE/Dice
// family; Lovasz goes through lovasz_loss.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& y_pred, const Tensor<T>& y_true, const LossSpec& spec);

// Binary Lovasz hinge on logits [B, ...]: per image, hinge errors sorted
// descending and weighted by the Jaccard-extension gradient of the sorted
// labels; mean over the batch. An image without positives contributes its
// largest hinge error only (Jaccard gradient 1 at the top rank, 0 after), so
// it scores 0 once every logit sits at or below -1.
template <typename T>
Tensor<T> lovasz_loss(const Tensor<T>& logits, const Tensor<T>& y_true);

// Dispatch on spec.kind; `logits` are raw model outputs.
template <typename T>
Tensor<T> loss_from_logits(const Tensor<T>& logits, const Tensor<T>& y_true, const LossSpec& spec);

}  // namespace cracknet::losses
