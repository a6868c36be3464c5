#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cracknet/data.hpp"
#include "cracknet/losses.hpp"
#include "cracknet/metrics.hpp"
#include "cracknet/models.hpp"

namespace cracknet::train {

struct TrainConfig {
  double lr = 0.001;
  double weight_decay = 0.0001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 12;
  std::int64_t epochs = 1000;
  losses::LossSpec loss = losses::LossSpec::of(losses::LossKind::Combine1);
  std::uint64_t seed = 0;
  int eval_every = 1;
  double threshold = 0.5;

  void validate() const;  // ConfigError
};

// Adam with bias correction; weight decay enters as g + wd * theta before
// the moment updates. `t` counts steps from 1.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, const TrainConfig& cfg,
                 std::int64_t t);

template <typename T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  // One update of every parameter in `store` from its accumulated grad.
  // NumericError names the first parameter with a non-finite gradient;
  // nothing is modified in that case.
  void step(ParamStore<T>& store);
  std::int64_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct EvalResult {
  metrics::MetricReport micro;
  metrics::MetricReport macro;
  std::vector<std::string> ids;
  std::vector<metrics::ConfusionCounts> per_image;
  std::vector<double> per_image_iou;
};

template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<const data::SegmentationSample*>& samples,
                    double threshold = 0.5, int batch_size = 12);

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0;
  bool evaluated = false;
  metrics::MetricReport val;
  double seconds = 0;
};

struct RunLog {
  std::vector<EpochRecord> epochs;

  // epoch,train_loss,val_iou,val_f1,val_precision,val_recall,val_accuracy,seconds
  // With `wall_clock` false the seconds column is written as 0 so reruns
  // compare byte for byte.
  std::string to_csv(bool wall_clock) const;
  static RunLog from_csv(const std::string& text);
};

inline const char* kRunLogHeader = "epoch,train_loss,val_iou,val_f1,val_precision,val_recall,val_accuracy,seconds";

struct TrainHooks {
  // Called after every epoch; returning false stops training early.
  std::function<bool(const EpochRecord&)> on_epoch;
};

// Trains on split.train ids and validates on split.val ids, both looked up
// in `dataset`. NumericError on a non-finite loss names epoch and batch.
template <typename T>
RunLog train(Model<T>& model, const std::vector<data::SegmentationSample>& dataset, const data::FoldSplit& split,
             const TrainConfig& config, const TrainHooks& hooks = {});

// Forward-only images per second over `samples`, after one untimed warm-up
// batch.
template <typename T>
double measure_throughput(const Model<T>& model, const std::vector<const data::SegmentationSample*>& samples,
                          int batch_size = 12);

}  // namespace cracknet::train
