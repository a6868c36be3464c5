#include "cracknet/train.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <sstream>

#include "cracknet/io.hpp"

namespace cracknet::train {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must lie in [0,1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2 must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("eps must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0,1)");
  loss.validate();
}

template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, const TrainConfig& cfg,
                 std::int64_t t) {
  if (t < 1) throw ContractError("adam step index starts at 1");
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(cfg.lr), wd = static_cast<T>(cfg.weight_decay), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i] + wd * theta[i];
    m[i] = b1 * m[i] + (1 - b1) * g;
    v[i] = b2 * v[i] + (1 - b2) * g * g;
    const T mhat = m[i] / c1;
    const T vhat = v[i] / c2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
void Adam<T>::step(ParamStore<T>& store) {
  auto& entries = store.entries();
  if (m_.empty()) {
    for (const auto& [name, p] : entries) {
      m_.emplace_back(static_cast<std::size_t>(p.size()), T(0));
      v_.emplace_back(static_cast<std::size_t>(p.size()), T(0));
    }
  }
  if (m_.size() != entries.size()) throw ContractError("optimizer state does not match the parameter set");
  for (const auto& [name, p] : entries) {
    if (!p.has_grad()) continue;
    for (T g : p.grad())
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + name + "'");
  }
  ++t_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i].second;
    std::vector<T> zeros;
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(static_cast<std::size_t>(p.size()), T(0));
      g = zeros;
    }
    adam_update<T>(p.mutable_values(), g, m_[i], v_[i], cfg_, t_);
  }
}

template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<const data::SegmentationSample*>& samples,
                    double threshold, int batch_size) {
  if (samples.empty()) throw ContractError("evaluate: no samples");
  NoGradGuard guard;
  EvalResult r;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const data::SegmentationSample*> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                       samples.begin() + static_cast<std::ptrdiff_t>(end));
    const auto mask = predict_mask(model.forward(data::stack_images<T>(chunk)), threshold);
    std::size_t off = 0;
    for (const auto* s : chunk) {
      const auto c = metrics::confusion_counts(std::span(mask).subspan(off, s->mask.size()), s->mask);
      off += s->mask.size();
      r.ids.push_back(s->id);
      r.per_image.push_back(c);
      r.per_image_iou.push_back(metrics::iou(c));
    }
  }
  metrics::ConfusionCounts pooled;
  for (const auto& c : r.per_image) pooled += c;
  r.micro = metrics::report(pooled);
  r.macro = metrics::macro_report(r.per_image);
  return r;
}

std::string RunLog::to_csv(bool wall_clock) const {
  std::string out = std::string(kRunLogHeader) + "\n";
  for (const auto& e : epochs) {
    const auto& v = e.val;
    auto metric = [&](double x) { return e.evaluated ? io::fixed6(x) : std::string(); };
    out += io::csv_row({std::to_string(e.epoch), io::fixed6(e.train_loss), metric(v.iou), metric(v.f1),
                        metric(v.precision), metric(v.recall), metric(v.accuracy),
                        io::fixed6(wall_clock ? e.seconds : 0.0)});
  }
  return out;
}

RunLog RunLog::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != kRunLogHeader) throw FormatError("not a RunLog CSV (header '" + line + "')");
  RunLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = io::split_csv_line(line);
    if (f.size() != 8) throw FormatError("RunLog row with " + std::to_string(f.size()) + " fields");
    EpochRecord e;
    try {
      e.epoch = std::stoll(f[0]);
      e.train_loss = std::stod(f[1]);
      e.evaluated = !f[2].empty();
      if (e.evaluated) {
        e.val.iou = std::stod(f[2]);
        e.val.f1 = std::stod(f[3]);
        e.val.precision = std::stod(f[4]);
        e.val.recall = std::stod(f[5]);
        e.val.accuracy = std::stod(f[6]);
      }
      e.seconds = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw FormatError("RunLog row '" + line + "' does not parse");
    }
    log.epochs.push_back(e);
  }
  return log;
}

template <typename T>
RunLog train(Model<T>& model, const std::vector<data::SegmentationSample>& dataset, const data::FoldSplit& split,
             const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  std::map<std::string, const data::SegmentationSample*> by_id;
  for (const auto& s : dataset) by_id[s.id] = &s;
  auto lookup = [&](const std::vector<std::string>& ids) {
    std::vector<const data::SegmentationSample*> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("split references unknown sample '" + id + "'");
      out.push_back(it->second);
    }
    return out;
  };
  lookup(split.train);
  const auto val = lookup(split.val);

  RunLog log;
  Adam<T> adam(config);
  using clock = std::chrono::steady_clock;
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = clock::now();
    double loss_sum = 0;
    std::size_t seen = 0;
    const auto order = data::batches(split.train, config.batch_size, config.seed, epoch);
    for (std::size_t b = 0; b < order.size(); ++b) {
      const auto chunk = lookup(order[b]);
      model.params().zero_grad();
      auto logits = model.forward(data::stack_images<T>(chunk));
      auto loss = losses::loss_from_logits(logits, data::stack_masks<T>(chunk), config.loss);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      }
      loss.backward();
      adam.step(model.params());
      loss_sum += value * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    if (!val.empty() && epoch % config.eval_every == 0) {
      rec.evaluated = true;
      rec.val = evaluate(model, val, config.threshold, config.batch_size).micro;
    }
    rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    log.epochs.push_back(rec);
    if (hooks.on_epoch && !hooks.on_epoch(rec)) break;
  }
  return log;
}

template <typename T>
double measure_throughput(const Model<T>& model, const std::vector<const data::SegmentationSample*>& samples,
                          int batch_size) {
  if (samples.empty()) throw ContractError("measure_throughput: no samples");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  NoGradGuard guard;
  auto chunk_at = [&](std::size_t start) {
    const auto end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    return std::vector<const data::SegmentationSample*>(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                        samples.begin() + static_cast<std::ptrdiff_t>(end));
  };
  model.forward(data::stack_images<T>(chunk_at(0)));  // warm-up
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size))
    model.forward(data::stack_images<T>(chunk_at(start)));
  const double secs = std::chrono::duration<double>(clock::now() - t0).count();
  return static_cast<double>(samples.size()) / std::max(secs, 1e-9);
}

#define CRACKNET_INSTANTIATE_TRAIN(T)                                                                                  \
  template void adam_update(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, const TrainConfig&,          \
                            std::int64_t);                                                                             \
  template class Adam<T>;                                                                                              \
  template EvalResult evaluate(const Model<T>&, const std::vector<const data::SegmentationSample*>&, double, int);      \
  template RunLog train(Model<T>&, const std::vector<data::SegmentationSample>&, const data::FoldSplit&,               \
                        const TrainConfig&, const TrainHooks&);                                                        \
  template double measure_throughput(const Model<T>&, const std::vector<const data::SegmentationSample*>&, int);

CRACKNET_INSTANTIATE_TRAIN(float)
CRACKNET_INSTANTIATE_TRAIN(double)

}  // namespace cracknet::train
