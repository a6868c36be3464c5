#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cracknet/params.hpp"
#include "cracknet/tensor.hpp"

namespace cracknet {

enum class Arch { UNet, TransUNet, SwinUNet, MtUNet };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);  // ConfigError on unknown names

enum class Scale { Toy, Full };

// Architecture hyperparameters. Which fields matter depends on the arch:
//   unet       stem_widths = encoder widths, last entry is the bottleneck
//   transunet  stem_widths = conv stem stages; embed_dim/depths[0]/heads[0]
//              describe the ViT on the 1/2^stages grid (1x1 patches)
//   swinunet   patch, embed_dim, window; depths[i] blocks at stage i (the
//              last stage is the bottleneck), heads[i]
//   mtunet     stem_widths = CNN levels from full resolution; then one MTM
//              level per depths[i] entry at embed_dim * 2^i channels
struct ModelConfig {
  Arch arch = Arch::UNet;
  int height = 64;
  int width = 64;
  int in_channels = 3;
  int out_channels = 1;
  int embed_dim = 32;
  std::vector<int> depths;
  std::vector<int> heads;
  int window = 4;
  int lgg_window = 4;
  int patch = 4;
  int memory_units = 32;
  int mlp_ratio = 4;
  std::vector<int> stem_widths;

  // Throws ConfigError naming the first failing constraint.
  void validate() const;

  static ModelConfig preset(Arch arch, Scale scale);
};

namespace detail {
template <typename T>
struct Network;
}

// A built network: named parameters plus the wiring that consumes them.
// Copies share parameters.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }

  // [B,H,W,in_channels] -> logits [B,H,W,1]
  Tensor<T> forward(const Tensor<T>& batch) const;

  std::int64_t param_count() const { return store_->param_count(); }

 private:
  ModelConfig config_;
  std::shared_ptr<ParamStore<T>> store_;
  std::shared_ptr<const detail::Network<T>> net_;
};

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  return Model<T>(config, seed);
}

template <typename T>
std::int64_t param_count(const Model<T>& model) {
  return model.param_count();
}

// Parameter bytes at single precision, in MiB.
inline double size_mb_for(std::int64_t params) { return static_cast<double>(params) * 4.0 / 1048576.0; }

template <typename T>
double model_size_mb(const Model<T>& model) {
  return size_mb_for(model.param_count());
}

// sigmoid(logit) >= threshold, ties included. Output has one byte per
// logit in the same order.
template <typename T>
std::vector<std::uint8_t> predict_mask(const Tensor<T>& logits, double threshold = 0.5);

// Checkpoint container: "CRKNET1", then per parameter a u32 name length,
// the name, a u32 rank, u32 extents and little-endian float32 values.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);

// Validates every name and extent against `model` before touching it;
// FormatError names the offending tensor.
template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path);

template <typename T>
Model<T> load_checkpoint(const std::string& path, const ModelConfig& config) {
  Model<T> m(config, 0);
  load_checkpoint(m, path);
  return m;
}

extern template class Model<float>;
extern template class Model<double>;

}  // namespace cracknet
