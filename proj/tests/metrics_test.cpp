#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <cstring>
#include <numeric>

#include "cracknet/metrics.hpp"
#include "cracknet/random.hpp"
#include "cracknet/tensor.hpp"

using namespace cracknet;
using namespace cracknet::metrics;

namespace {

std::vector<std::uint8_t> random_mask(std::size_t n, Rng& rng, double fraction) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = rng.uniform() < fraction ? 1 : 0;
  return m;
}

ConfusionCounts counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  ConfusionCounts c;
  c.tp = tp;
  c.fp = fp;
  c.fn = fn;
  c.tn = tn;
  return c;
}

}  // namespace

TEST(Confusion, Anchors) {
  std::vector<std::uint8_t> t(100, 0);
  for (int i = 0; i < 5; ++i) t[static_cast<std::size_t>(i * 7)] = 1;
  EXPECT_EQ(confusion_counts(t, t), counts(5, 0, 0, 95));
  std::vector<std::uint8_t> z(100, 0), three(100, 0);
  three[1] = three[50] = three[99] = 1;
  EXPECT_EQ(confusion_counts(z, three), counts(0, 0, 3, 97));
}

TEST(Confusion, BruteForceOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = random_mask(256, rng, rng.uniform());
    auto t = random_mask(256, rng, rng.uniform());
    ConfusionCounts want;
    for (std::size_t i = 0; i < 256; ++i) {
      if (p[i] && t[i]) ++want.tp;
      if (p[i] && !t[i]) ++want.fp;
      if (!p[i] && t[i]) ++want.fn;
      if (!p[i] && !t[i]) ++want.tn;
    }
    const auto got = confusion_counts(p, t);
    ASSERT_EQ(got, want);
    ASSERT_EQ(got.total(), 256);
  }
}

TEST(Confusion, ContractErrors) {
  std::vector<std::uint8_t> a(4, 0), b(5, 0), c{0, 1, 2, 0};
  EXPECT_THROW(confusion_counts(a, b), ContractError);
  EXPECT_THROW(confusion_counts(a, c), ContractError);
}

TEST(Metrics, ArithmeticAnchors) {
  auto c = counts(3, 1, 2, 10);
  EXPECT_DOUBLE_EQ(iou(c), 0.5);
  EXPECT_DOUBLE_EQ(f1(c), 6.0 / 9.0);
  EXPECT_DOUBLE_EQ(precision(c), 0.75);
  EXPECT_DOUBLE_EQ(recall(c), 0.6);
  EXPECT_DOUBLE_EQ(accuracy(c), 13.0 / 16.0);
}

TEST(Metrics, DegenerateDenominators) {
  auto empty = counts(0, 0, 0, 50);
  EXPECT_EQ(iou(empty), 1.0);
  EXPECT_EQ(f1(empty), 1.0);
  EXPECT_EQ(precision(empty), 1.0);
  EXPECT_EQ(recall(empty), 1.0);
  EXPECT_EQ(accuracy(empty), 1.0);
  auto missed = counts(0, 0, 4, 46);  // nothing predicted, something missed
  EXPECT_EQ(precision(missed), 0.0);
  EXPECT_EQ(recall(missed), 0.0);
  auto hallucinated = counts(0, 4, 0, 46);
  EXPECT_EQ(recall(hallucinated), 0.0);
  EXPECT_EQ(precision(hallucinated), 0.0);
  EXPECT_EQ(iou(hallucinated), 0.0);
}

TEST(Metrics, BoundsHarmonicMeanAndIouBelowF1) {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    auto c = counts(rng.uniform_int(0, 50), rng.uniform_int(0, 50), rng.uniform_int(0, 50), rng.uniform_int(0, 50));
    const auto r = report(c);
    for (double v : {r.iou, r.accuracy, r.precision, r.recall, r.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (c.tp + c.fp + c.fn > 0) {
      EXPECT_NEAR(r.f1, 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn), 1e-12);
    }
    if (c.tp > 0) {
      EXPECT_LE(r.iou, r.f1);
      EXPECT_NEAR(r.f1, 2 * r.precision * r.recall / (r.precision + r.recall), 1e-12);
    }
    EXPECT_EQ(r.counts, c);
  }
}

TEST(Metrics, PermutationInvariance) {
  Rng rng(3);
  auto p = random_mask(256, rng, 0.3);
  auto t = random_mask(256, rng, 0.3);
  auto base = confusion_counts(p, t);
  std::vector<std::size_t> order(256);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::uint8_t> pp(256), tt(256);
  for (std::size_t i = 0; i < 256; ++i) {
    pp[i] = p[order[i]];
    tt[i] = t[order[i]];
  }
  EXPECT_EQ(confusion_counts(pp, tt), base);
}

TEST(Metrics, MacroIsMeanOfPerImage) {
  std::vector<ConfusionCounts> per{counts(3, 1, 2, 10), counts(0, 0, 0, 16), counts(5, 5, 0, 6)};
  auto r = macro_report(per);
  EXPECT_NEAR(r.iou, (0.5 + 1.0 + 0.5) / 3.0, 1e-15);
  EXPECT_EQ(r.counts, counts(8, 6, 2, 32));
  auto micro = report(r.counts);
  EXPECT_NEAR(micro.iou, 8.0 / 16.0, 1e-15);
}

TEST(Metrics, CsvRow) {
  auto row = metric_csv_row("unet", "val/micro", 1, report(counts(3, 1, 2, 10)));
  EXPECT_EQ(row.substr(0, 17), "unet,val/micro,1,");
  EXPECT_NE(row.find(",3,1,2,10"), std::string::npos) << row;
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(kMetricCsvHeader, kMetricCsvHeader + std::strlen(kMetricCsvHeader), ','));
}

TEST(RollingStats, Anchors) {
  std::vector<double> s(40);
  std::iota(s.begin(), s.end(), 1.0);
  auto w = rolling_stats(s);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_DOUBLE_EQ(w[0].mean, 10.5);
  EXPECT_DOUBLE_EQ(w[1].mean, 30.5);
  std::vector<double> c(45, 0.3);
  auto wc = rolling_stats(c);
  ASSERT_EQ(wc.size(), 2u);  // trailing partial window dropped
  for (const auto& x : wc) EXPECT_EQ(x.std, 0.0);
  EXPECT_THROW(rolling_stats(std::vector<double>(19, 1.0)), ContractError);
}

TEST(RollingStats, TwoPassOracle) {
  Rng rng(4);
  std::vector<double> s(137);
  for (auto& v : s) v = rng.uniform(-5, 5);
  for (int window : {1, 7, 20, 137}) {
    auto w = rolling_stats(s, window);
    ASSERT_EQ(w.size(), s.size() / static_cast<std::size_t>(window));
    for (std::size_t k = 0; k < w.size(); ++k) {
      double m = 0;
      for (int i = 0; i < window; ++i) m += s[k * static_cast<std::size_t>(window) + static_cast<std::size_t>(i)];
      m /= window;
      double v = 0;
      for (int i = 0; i < window; ++i) {
        const double d = s[k * static_cast<std::size_t>(window) + static_cast<std::size_t>(i)] - m;
        v += d * d;
      }
      EXPECT_NEAR(w[k].mean, m, 1e-12);
      EXPECT_NEAR(w[k].std, std::sqrt(v / window), 1e-12);
    }
  }
}

TEST(TailAverage, AnchorsAndOracle) {
  EXPECT_EQ(tail_average(std::vector<double>(150, 0.25)), 0.25);
  EXPECT_EQ(tail_average(std::vector<double>{9, 9, 1, 2, 3}, 3), 2.0);
  EXPECT_THROW(tail_average(std::vector<double>(99, 1.0)), ContractError);
  Rng rng(5);
  std::vector<double> s(300);
  for (auto& v : s) v = rng.uniform();
  double sum = 0;
  for (std::size_t i = 200; i < 300; ++i) sum += s[i];
  EXPECT_NEAR(tail_average(s), sum / 100.0, 1e-14);
}

TEST(Histogram, AnchorsAndBinningOracle) {
  auto h = histogram(std::vector<double>(30, 0.42));
  ASSERT_EQ(h.counts.size(), 20u);
  ASSERT_EQ(h.edges.size(), 21u);
  EXPECT_EQ(std::count_if(h.counts.begin(), h.counts.end(), [](auto c) { return c != 0; }), 1);
  EXPECT_EQ(h.counts[8], 30);

  std::vector<double> grid;
  for (int i = 0; i < 40; ++i) grid.push_back((i + 0.5) / 40.0);
  for (auto c : histogram(grid, 10).counts) EXPECT_EQ(c, 4);

  Rng rng(6);
  std::vector<double> v(5000);
  for (auto& x : v) x = rng.uniform(-0.2, 1.2);
  v.push_back(1.0);
  v.push_back(0.0);
  auto hr = histogram(v, 13, 0.0, 1.0);
  std::vector<std::int64_t> want(13, 0);
  for (double x : v) {
    int b = static_cast<int>(std::floor(x * 13.0));
    want[static_cast<std::size_t>(std::clamp(b, 0, 12))]++;
  }
  EXPECT_EQ(hr.counts, want);
  EXPECT_EQ(std::accumulate(hr.counts.begin(), hr.counts.end(), std::int64_t{0}), static_cast<std::int64_t>(v.size()));
  auto centers = hr.centers();
  EXPECT_NEAR(centers[0], 0.5 / 13.0, 1e-15);
}

TEST(GaussianFit, FwhmConstant) { EXPECT_NEAR(kFwhmPerSigma, 2.0 * std::sqrt(2.0 * std::log(2.0)), 1e-15); }

TEST(GaussianFit, ExactCountsRecoverParameters) {
  std::vector<double> x, y;
  for (int i = 0; i < 40; ++i) {
    x.push_back(0.6 + 0.01 * i);
    y.push_back(100.0 * std::exp(-std::pow(x.back() - 0.8, 2) / (2 * 0.05 * 0.05)));
  }
  auto f = gaussian_fit(x, y);
  EXPECT_TRUE(f.converged);
  EXPECT_NEAR(f.mu, 0.8, 1e-6);
  EXPECT_NEAR(f.sigma, 0.05, 1e-6);
  EXPECT_NEAR(f.amplitude, 100.0, 1e-4);
  EXPECT_LT(f.residual_norm, 1e-8);
  EXPECT_EQ(f.fwhm, kFwhmPerSigma * f.sigma);

  std::vector<double> ux, uy;
  for (int i = -20; i <= 20; ++i) {
    ux.push_back(0.25 * i);
    uy.push_back(7.0 * std::exp(-ux.back() * ux.back() / 2.0));
  }
  auto unit = gaussian_fit(ux, uy);
  EXPECT_NEAR(unit.fwhm, 2.3548, 1e-4);
}

TEST(GaussianFit, SampledNormal) {
  Rng rng(7);
  std::vector<double> v(10000);
  for (auto& x : v) x = 0.8 + 0.05 * rng.normal();
  auto h = histogram(v, 40, 0.6, 1.0);
  std::vector<double> cnt(h.counts.begin(), h.counts.end());
  auto f = gaussian_fit(h.centers(), cnt);
  EXPECT_NEAR(f.mu, 0.8, 0.005);
  EXPECT_NEAR(f.fwhm, 0.1177, 0.1177 * 0.05);
}

TEST(GaussianFit, TooFewBinsIsContractError) {
  std::vector<double> x{0, 1, 2, 3, 4}, y{0, 5, 9, 5, 0};
  EXPECT_THROW(gaussian_fit(x, y), ContractError);
}
