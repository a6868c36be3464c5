#pragma once

#include <string>
#include <vector>

#include "cracknet/models.hpp"
#include "cracknet/train.hpp"

namespace cracknet {

// Everything a training run needs besides data. Text form is flat
// `key = value` lines; '#' starts a comment. `arch` and `scale` pick a preset
// that the remaining keys override. Unknown keys are rejected.
//
// keys: arch scale height width embed_dim depths heads window lgg_window
//       patch memory_units mlp_ratio stem_widths
//       lr weight_decay beta1 beta2 eps batch_size epochs loss seed
//       eval_every threshold split_ratio
struct RunConfig {
  ModelConfig model = ModelConfig::preset(Arch::MtUNet, Scale::Toy);
  train::TrainConfig train;
  double split_ratio = 0.8;

  void validate() const;
  // Canonical text listing every key; parse_run_config(to_text()) round-trips.
  std::string to_text() const;
};

const std::vector<std::string>& config_keys();

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace cracknet
