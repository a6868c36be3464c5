#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cracknet/grad_check.hpp"
#include "cracknet/losses.hpp"
#include "cracknet/ops.hpp"
#include "test_util.hpp"

using namespace cracknet;
using namespace cracknet::losses;
using testutil::rand_tensor;
using TD = Tensor<double>;

namespace {

TD mask_tensor(Shape shape, std::uint64_t seed, double fraction = 0.4) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform() < fraction ? 1.0 : 0.0;
  return TD(shape, v);
}

double value(const TD& t) { return t.values()[0]; }

// Jaccard loss of flipping the predictions in `flipped`, labels `y`.
double jaccard_loss(const std::vector<int>& y, const std::vector<bool>& flipped) {
  int pos = 0, lost = 0, extra = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    pos += y[i];
    if (flipped[i]) (y[i] ? lost : extra)++;
  }
  const int uni = pos + extra;
  if (uni == 0) return 0.0;
  return 1.0 - static_cast<double>(pos - lost) / uni;
}

// Lovasz extension as the support function of the base polytope of the
// (submodular) Jaccard loss: maximum over every ordering of the greedy sum.
double lovasz_oracle(const std::vector<double>& logits, const std::vector<int>& y) {
  const std::size_t n = y.size();
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = std::max(0.0, 1.0 - logits[i] * (2.0 * y[i] - 1.0));
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    std::vector<bool> in(n, false);
    double prev = 0.0, s = 0.0;
    for (int k : perm) {
      in[static_cast<std::size_t>(k)] = true;
      const double cur = jaccard_loss(y, in);
      s += m[static_cast<std::size_t>(k)] * (cur - prev);
      prev = cur;
    }
    best = std::max(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Bce, AnalyticAnchors) {
  EXPECT_NEAR(value(bce_loss(TD({1}, {0.5}), TD({1}, {1.0}))), std::log(2.0), 1e-15);
  EXPECT_NEAR(value(bce_loss(TD({1}, {1.0 - 1e-7}), TD({1}, {1.0}))), 0.0, 1e-6);
  // clamping keeps exact 0/1 predictions finite
  EXPECT_NEAR(value(bce_loss(TD({2}, {0.0, 1.0}), TD({2}, {1.0, 0.0}))), -std::log(kBceClamp), 1e-6);
  EXPECT_NEAR(value(bce_loss(TD({2}, {1.0, 0.0}), TD({2}, {1.0, 0.0}))), -std::log1p(-kBceClamp), 1e-12);
}

TEST(Bce, PerPixelLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = rand_tensor({2, 8, 8}, seed, false, 0.0, 1.0);
    auto y = mask_tensor({2, 8, 8}, seed + 100);
    double want = 0.0;
    for (std::size_t i = 0; i < 128; ++i) {
      const double q = std::clamp(p.values()[i], kBceClamp, 1.0 - kBceClamp);
      want -= y.values()[i] * std::log(q) + (1.0 - y.values()[i]) * std::log(1.0 - q);
    }
    EXPECT_NEAR(value(bce_loss(p, y)), want / 128.0, 1e-7);
  }
}

TEST(Dice, ArithmeticAnchors) {
  // |X| = |Y| = 4, overlap 2
  TD x({1, 2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
  TD y({1, 2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
  EXPECT_NEAR(value(dice_loss(x, y)), 1.0 - 5.0 / 9.0, 1e-15);
  TD z({1, 2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
  EXPECT_NEAR(value(dice_loss(x, z)), 1.0 - 1.0 / 9.0, 1e-15);
  EXPECT_NEAR(value(dice_loss(x, x)), 0.0, 1e-15);
  // empty masks: smoothing avoids 0/0
  TD e = TD::zeros({1, 2, 4});
  EXPECT_NEAR(value(dice_loss(e, e)), 0.0, 1e-15);
}

TEST(Dice, IdenticalLargeMasksNearZero) {
  auto y = mask_tensor({1, 224, 224}, 7, 0.05);
  double l = value(dice_loss(y, y));
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-3);
}

TEST(Dice, SoftOracleAndPermutationInvariance) {
  auto p = rand_tensor({2, 6, 6}, 8, false, 0.0, 1.0);
  auto y = mask_tensor({2, 6, 6}, 9);
  double spy = 0, sp = 0, sy = 0;
  for (std::size_t i = 0; i < 72; ++i) {
    spy += p.values()[i] * y.values()[i];
    sp += p.values()[i];
    sy += y.values()[i];
  }
  const double d = value(dice_loss(p, y));
  EXPECT_NEAR(d, 1.0 - (2 * spy + kDiceSmooth) / (sp + sy + kDiceSmooth), 1e-14);
  std::vector<std::size_t> order(72);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(10);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  std::vector<double> pp(72), yy(72);
  for (std::size_t i = 0; i < 72; ++i) {
    pp[i] = p.values()[order[i]];
    yy[i] = y.values()[order[i]];
  }
  EXPECT_NEAR(value(dice_loss(TD({2, 6, 6}, pp), TD({2, 6, 6}, yy))), d, 1e-14);
}

TEST(Combined, WeightsAndLinearity) {
  auto p = rand_tensor({2, 5, 5}, 11, false, 0.05, 0.95);
  auto y = mask_tensor({2, 5, 5}, 12);
  const double b = value(bce_loss(p, y)), d = value(dice_loss(p, y));
  EXPECT_NEAR(value(combined_loss(p, y, LossSpec::of(LossKind::Combine1))), 0.5 * b + d, 1e-12);
  EXPECT_NEAR(value(combined_loss(p, y, LossSpec::of(LossKind::Combine2))), b + d, 1e-12);
  EXPECT_NEAR(value(combined_loss(p, y, LossSpec::of(LossKind::Bce))), b, 1e-12);
  EXPECT_NEAR(value(combined_loss(p, y, LossSpec::of(LossKind::Dice))), d, 1e-12);
  auto s1 = LossSpec::of(LossKind::Combine1);
  EXPECT_EQ(s1.bce_weight, 0.5);
  EXPECT_EQ(s1.dice_weight, 1.0);
  auto s2 = LossSpec::of(LossKind::Combine2);
  EXPECT_EQ(s2.bce_weight, 1.0);
  EXPECT_EQ(s2.dice_weight, 1.0);
  s1.bce_weight = 0.7;
  EXPECT_THROW(s1.validate(), ConfigError);
}

TEST(Combined, GradientIsWeightedSumOfComponents) {
  auto p0 = rand_tensor({1, 4, 4}, 13, false, 0.05, 0.95);
  auto y = mask_tensor({1, 4, 4}, 14);
  auto grad_of = [&](auto fn) {
    auto p = p0.clone(true);
    fn(p).backward();
    return testutil::as_vec(TD({16}, std::vector<double>(p.grad().begin(), p.grad().end())));
  };
  auto gb = grad_of([&](const TD& p) { return bce_loss(p, y); });
  auto gd = grad_of([&](const TD& p) { return dice_loss(p, y); });
  auto gc = grad_of([&](const TD& p) { return combined_loss(p, y, LossSpec::of(LossKind::Combine1)); });
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(gc[i], 0.5 * gb[i] + gd[i], 1e-12);
}

TEST(Losses, ShapeMismatchIsDimensionError) {
  auto p = rand_tensor({1, 4, 4}, 1, false, 0.1, 0.9);
  auto y = TD::zeros({1, 4, 5});
  EXPECT_THROW(bce_loss(p, y), DimensionError);
  EXPECT_THROW(dice_loss(p, y), DimensionError);
  EXPECT_THROW(lovasz_loss(p, y), DimensionError);
}

TEST(Losses, NamesRoundTrip) {
  for (const auto& n : loss_names()) EXPECT_EQ(loss_name(parse_loss(n)), n);
  EXPECT_EQ(loss_names().size(), 5u);
  EXPECT_THROW(parse_loss("focal"), ConfigError);
}

TEST(Losses, NonNegativeAndMinimalAtPerfectPrediction) {
  auto y = mask_tensor({2, 6, 6}, 15);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = rand_tensor({2, 6, 6}, seed, false, 0.0, 1.0);
    EXPECT_GE(value(bce_loss(p, y)), value(bce_loss(y, y)));
    EXPECT_GE(value(dice_loss(p, y)), value(dice_loss(y, y)));
    auto z = rand_tensor({2, 6, 6}, seed + 50, false, -3, 3);
    EXPECT_GE(value(lovasz_loss(z, y)), 0.0);
  }
}

TEST(Lovasz, AnalyticAnchors) {
  EXPECT_NEAR(value(lovasz_loss(TD({1, 1, 1}, {0.0}), TD({1, 1, 1}, {1.0}))), 1.0, 1e-15);
  // perfect separation with margin
  TD logits({1, 2, 2}, {2.0, -1.5, 1.0, -3.0});
  TD y({1, 2, 2}, {1, 0, 1, 0});
  EXPECT_EQ(value(lovasz_loss(logits, y)), 0.0);
  // all background, all logits <= -1
  EXPECT_EQ(value(lovasz_loss(TD({1, 1, 3}, {-1.0, -2.0, -5.0}), TD::zeros({1, 1, 3}))), 0.0);
  // all background: largest hinge only
  EXPECT_NEAR(value(lovasz_loss(TD({1, 1, 3}, {0.5, -0.5, 0.0}), TD::zeros({1, 1, 3}))), 1.5, 1e-15);
}

TEST(Lovasz, ExhaustiveDirectDefinitionOracle) {
  Rng rng(16);
  int cases = 0;
  for (int n = 1; n <= 8; ++n) {
    // every labelling for n <= 6, a random sample of labellings beyond
    const int patterns = 1 << n;
    for (int bits = 0; bits < patterns; ++bits) {
      if (n > 6 && rng.uniform() > 0.05) continue;
      std::vector<int> y(static_cast<std::size_t>(n));
      std::vector<double> yd(y.size()), z(y.size());
      for (int i = 0; i < n; ++i) {
        y[static_cast<std::size_t>(i)] = (bits >> i) & 1;
        yd[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)];
        z[static_cast<std::size_t>(i)] = rng.uniform(-2.5, 2.5);
      }
      const double got = value(lovasz_loss(TD({1, 1, n}, z), TD({1, 1, n}, yd)));
      ASSERT_NEAR(got, lovasz_oracle(z, y), 1e-12) << "n=" << n << " bits=" << bits;
      ++cases;
    }
  }
  EXPECT_GT(cases, 130);
}

TEST(Lovasz, BatchIsMeanOfImages) {
  auto z = rand_tensor({3, 2, 3}, 17, false, -2, 2);
  auto y = mask_tensor({3, 2, 3}, 18);
  double sum = 0;
  for (int b = 0; b < 3; ++b) {
    std::vector<double> zb(z.values().begin() + 6 * b, z.values().begin() + 6 * b + 6);
    std::vector<double> yb(y.values().begin() + 6 * b, y.values().begin() + 6 * b + 6);
    sum += value(lovasz_loss(TD({1, 2, 3}, zb), TD({1, 2, 3}, yb)));
  }
  EXPECT_NEAR(value(lovasz_loss(z, y)), sum / 3.0, 1e-14);
}

TEST(Lovasz, NonIncreasingAsPixelMovesTowardItsLabel) {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(2, 8);
    std::vector<double> z(static_cast<std::size_t>(n)), y(z.size());
    for (int i = 0; i < n; ++i) {
      z[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
      y[static_cast<std::size_t>(i)] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    const int k = rng.uniform_int(0, n - 1);
    const double before = value(lovasz_loss(TD({1, 1, n}, z), TD({1, 1, n}, y)));
    z[static_cast<std::size_t>(k)] += (y[static_cast<std::size_t>(k)] > 0 ? 1 : -1) * rng.uniform(0.01, 1.0);
    const double after = value(lovasz_loss(TD({1, 1, n}, z), TD({1, 1, n}, y)));
    EXPECT_LE(after, before + 1e-12);
  }
}

TEST(Lovasz, FromLogitsDispatch) {
  auto z = rand_tensor({1, 3, 3}, 20, false, -2, 2);
  auto y = mask_tensor({1, 3, 3}, 21);
  EXPECT_EQ(value(loss_from_logits(z, y, LossSpec::of(LossKind::Lovasz))), value(lovasz_loss(z, y)));
  EXPECT_NEAR(value(loss_from_logits(z, y, LossSpec::of(LossKind::Combine2))),
              value(combined_loss(ops::sigmoid(z), y, LossSpec::of(LossKind::Combine2))), 1e-14);
}

class LossGrad : public ::testing::TestWithParam<int> {};

TEST_P(LossGrad, AllKindsPassGradCheck) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto y = mask_tensor({2, 3, 3}, seed + 40);
  for (LossKind k : {LossKind::Bce, LossKind::Dice, LossKind::Combine1, LossKind::Combine2, LossKind::Lovasz}) {
    auto z = rand_tensor({2, 3, 3}, seed, true, -2, 2);
    const auto spec = LossSpec::of(k);
    double err = grad_check([&](const std::vector<TD>& in) { return loss_from_logits(in[0], y, spec); }, {z});
    EXPECT_LE(err, 1e-5) << loss_name(k);
  }
  auto p = rand_tensor({2, 3, 3}, seed + 1, true, 0.05, 0.95);
  EXPECT_LE(grad_check([&](const std::vector<TD>& in) { return bce_loss(in[0], y); }, {p}), 1e-5);
  EXPECT_LE(grad_check([&](const std::vector<TD>& in) { return dice_loss(in[0], y); }, {p}), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGrad, ::testing::Values(1, 2, 3));
