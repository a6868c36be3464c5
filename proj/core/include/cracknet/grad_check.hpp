#pragma once

#include <functional>
#include <vector>

#include "cracknet/tensor.hpp"

namespace cracknet {

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares reverse-mode gradients of a scalar function against central
// differences and returns max |analytic - numeric| / max(1, |analytic|) over
// every element of every input. Inputs are treated as leaves and have their
// grads overwritten.
double grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double h = 1e-4);

}  // namespace cracknet
