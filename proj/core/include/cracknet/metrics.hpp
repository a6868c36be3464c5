#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cracknet::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

// Crack (1) is the positive class. ContractError on unequal sizes or values
// other than 0/1.
ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

// Empty denominators: iou and f1 are 1 when tp+fp+fn == 0; precision is 1
// when nothing was predicted and nothing missed, else 0; recall likewise
// with fp in place of fn.
double iou(const ConfusionCounts& c);
double accuracy(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double f1(const ConfusionCounts& c);

struct MetricReport {
  double iou = 0, accuracy = 0, precision = 0, recall = 0, f1 = 0;
  ConfusionCounts counts;
};

MetricReport report(const ConfusionCounts& c);
// Mean of per-image metrics; counts are the pooled totals.
MetricReport macro_report(const std::vector<ConfusionCounts>& per_image);

inline const char* kMetricCsvHeader = "model,split,fold,iou,accuracy,precision,recall,f1,tp,fp,fn,tn";
std::string metric_csv_row(const std::string& model, const std::string& split, int fold, const MetricReport& r);

// ---------------------------------------------------------------- training curves

struct WindowStat {
  double mean = 0;
  double std = 0;  // population
};

// Non-overlapping consecutive windows; a trailing partial window is dropped.
std::vector<WindowStat> rolling_stats(std::span<const double> series, int window = 20);

double tail_average(std::span<const double> series, int n = 100);

// ---------------------------------------------------------------- histogram / Gaussian fit

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::int64_t> counts;

  std::vector<double> centers() const;
};

// Values outside [lo, hi] land in the first/last bin; hi itself is in the
// last bin.
Histogram histogram(std::span<const double> values, int bins = 20, double lo = 0.0, double hi = 1.0);

inline const double kFwhmPerSigma = 2.0 * 1.1774100225154747;  // 2 sqrt(2 ln 2)

struct GaussFit {
  double amplitude = 0, mu = 0, sigma = 0, fwhm = 0;
  double residual_norm = 0;
  int iterations = 0;
  bool converged = false;
};

// Least squares a * exp(-(x-mu)^2 / (2 sigma^2)) by Gauss-Newton from the
// weighted sample moments; at most 200 iterations, stop when the step norm
// drops below 1e-10. Needs at least 4 nonzero bins (ContractError).
GaussFit gaussian_fit(std::span<const double> centers, std::span<const double> counts);

}  // namespace cracknet::metrics
