#include "cracknet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace cracknet {

namespace {
double eval_scalar(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs) {
  NoGradGuard guard;
  auto y = fn(inputs);
  if (y.size() != 1) throw ContractError("grad_check: function is not scalar-valued, got " + shape_str(y.shape()));
  double v = y.item();
  if (!std::isfinite(v)) throw ContractError("grad_check: function produced a non-finite value");
  return v;
}
}  // namespace

double grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double h) {
  if (!(h > 0)) throw ContractError("grad_check: step must be positive");
  for (const auto& in : inputs) {
    if (!in.is_leaf() || !in.requires_grad()) throw ContractError("grad_check: inputs must be tracked leaves");
    auto t = in;
    t.zero_grad();
  }
  auto y = fn(inputs);
  if (y.size() != 1) throw ContractError("grad_check: function is not scalar-valued, got " + shape_str(y.shape()));
  if (!std::isfinite(y.item())) throw ContractError("grad_check: function produced a non-finite value");
  y.backward();

  double worst = 0.0;
  for (const auto& in : inputs) {
    auto t = in;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(t.size()), 0.0);
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = eval_scalar(fn, inputs);
      values[i] = saved - h;
      const double down = eval_scalar(fn, inputs);
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cracknet
