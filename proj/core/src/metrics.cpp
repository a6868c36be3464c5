#include "cracknet/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "cracknet/io.hpp"
#include "cracknet/tensor.hpp"

namespace cracknet::metrics {

ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw ContractError("confusion_counts: " + std::to_string(pred.size()) + " predictions vs " +
                        std::to_string(truth.size()) + " labels");
  }
  std::int64_t cell[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || truth[i] > 1) throw ContractError("confusion_counts: masks must be binary");
    ++cell[pred[i]][truth[i]];
  }
  return {cell[1][1], cell[1][0], cell[0][1], cell[0][0]};
}

double iou(const ConfusionCounts& c) {
  const auto den = c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

double accuracy(const ConfusionCounts& c) {
  const auto den = c.total();
  return den == 0 ? 1.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(den);
}

double precision(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

double recall(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double f1(const ConfusionCounts& c) {
  const auto den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

MetricReport report(const ConfusionCounts& c) { return {iou(c), accuracy(c), precision(c), recall(c), f1(c), c}; }

MetricReport macro_report(const std::vector<ConfusionCounts>& per_image) {
  MetricReport m;
  if (per_image.empty()) return report({});
  for (const auto& c : per_image) {
    const auto r = report(c);
    m.iou += r.iou;
    m.accuracy += r.accuracy;
    m.precision += r.precision;
    m.recall += r.recall;
    m.f1 += r.f1;
    m.counts += c;
  }
  const double n = static_cast<double>(per_image.size());
  m.iou /= n;
  m.accuracy /= n;
  m.precision /= n;
  m.recall /= n;
  m.f1 /= n;
  return m;
}

std::string metric_csv_row(const std::string& model, const std::string& split, int fold, const MetricReport& r) {
  return io::csv_row({model, split, std::to_string(fold), io::fixed6(r.iou), io::fixed6(r.accuracy),
                      io::fixed6(r.precision), io::fixed6(r.recall), io::fixed6(r.f1), std::to_string(r.counts.tp),
                      std::to_string(r.counts.fp), std::to_string(r.counts.fn), std::to_string(r.counts.tn)});
}

// ---------------------------------------------------------------- curves

std::vector<WindowStat> rolling_stats(std::span<const double> series, int window) {
  if (window < 1) throw ContractError("rolling_stats: window must be >= 1");
  if (static_cast<std::size_t>(window) > series.size()) {
    throw ContractError("rolling_stats: window " + std::to_string(window) + " exceeds series length " +
                        std::to_string(series.size()));
  }
  std::vector<WindowStat> out;
  for (std::size_t s = 0; s + window <= series.size(); s += static_cast<std::size_t>(window)) {
    double mean = 0;
    for (int i = 0; i < window; ++i) mean += series[s + i];
    mean /= window;
    // one correction pass so a constant window gets its exact value back
    double resid = 0;
    for (int i = 0; i < window; ++i) resid += series[s + i] - mean;
    mean += resid / window;
    double var = 0;
    for (int i = 0; i < window; ++i) var += (series[s + i] - mean) * (series[s + i] - mean);
    out.push_back({mean, std::sqrt(var / window)});
  }
  return out;
}

double tail_average(std::span<const double> series, int n) {
  if (n < 1 || static_cast<std::size_t>(n) > series.size()) {
    throw ContractError("tail_average: n = " + std::to_string(n) + " with " + std::to_string(series.size()) +
                        " entries");
  }
  double sum = 0;
  for (std::size_t i = series.size() - n; i < series.size(); ++i) sum += series[i];
  return sum / n;
}

// ---------------------------------------------------------------- histogram

std::vector<double> Histogram::centers() const {
  std::vector<double> c;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) c.push_back(0.5 * (edges[i] + edges[i + 1]));
  return c;
}

Histogram histogram(std::span<const double> values, int bins, double lo, double hi) {
  if (bins < 1) throw ContractError("histogram: bins must be >= 1");
  if (!(lo < hi)) throw ContractError("histogram: empty range");
  Histogram h;
  const double width = (hi - lo) / bins;
  for (int i = 0; i <= bins; ++i) h.edges.push_back(i == bins ? hi : lo + width * i);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto b = static_cast<long long>(std::floor((v - lo) / width));
    b = std::clamp<long long>(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

// ---------------------------------------------------------------- Gaussian fit

namespace {
double residual_norm(std::span<const double> x, std::span<const double> y, double a, double mu, double sigma) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mu;
    const double r = a * std::exp(-d * d / (2 * sigma * sigma)) - y[i];
    s += r * r;
  }
  return std::sqrt(s);
}
}  // namespace

GaussFit gaussian_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("gaussian_fit: centers and counts differ in length");
  if (std::count_if(y.begin(), y.end(), [](double v) { return v != 0.0; }) < 4) {
    throw ContractError("gaussian_fit: needs at least 4 nonzero bins");
  }
  double total = 0, mu = 0, peak = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    total += y[i];
    mu += y[i] * x[i];
    peak = std::max(peak, y[i]);
  }
  mu /= total;
  double var = 0;
  for (std::size_t i = 0; i < x.size(); ++i) var += y[i] * (x[i] - mu) * (x[i] - mu);
  Eigen::Vector3d p(peak, mu, std::sqrt(var / total));

  GaussFit fit;
  double norm = residual_norm(x, y, p[0], p[1], p[2]);
  for (int it = 1; it <= 200; ++it) {
    fit.iterations = it;
    Eigen::MatrixXd J(x.size(), 3);
    Eigen::VectorXd r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - p[1];
      const double s2 = p[2] * p[2];
      const double e = std::exp(-d * d / (2 * s2));
      r[i] = p[0] * e - y[i];
      J(i, 0) = e;
      J(i, 1) = p[0] * e * d / s2;
      J(i, 2) = p[0] * e * d * d / (s2 * p[2]);
    }
    const Eigen::Vector3d step = (J.transpose() * J).ldlt().solve(-J.transpose() * r);
    if (!step.allFinite()) break;
    // backtrack so a poor moment start cannot diverge
    double t = 1.0;
    Eigen::Vector3d next = p + step;
    double next_norm = residual_norm(x, y, next[0], next[1], std::abs(next[2]));
    for (int k = 0; k < 30 && !(next_norm <= norm); ++k) {
      t *= 0.5;
      next = p + t * step;
      next_norm = residual_norm(x, y, next[0], next[1], std::abs(next[2]));
    }
    if (!(next_norm <= norm)) {
      fit.converged = (t * step).norm() < 1e-10;
      break;
    }
    next[2] = std::abs(next[2]);
    p = next;
    norm = next_norm;
    if ((t * step).norm() < 1e-10) {
      fit.converged = true;
      break;
    }
  }
  fit.amplitude = p[0];
  fit.mu = p[1];
  fit.sigma = p[2];
  fit.fwhm = kFwhmPerSigma * p[2];
  fit.residual_norm = norm;
  return fit;
}

}  // namespace cracknet::metrics
