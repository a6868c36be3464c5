#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cracknet::cli {

inline constexpr const char* kToolVersion = "0.1.0";

// Process exit codes.
enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// CRACKNET_THREADS=1: single-threaded, byte-reproducible outputs.
bool deterministic_mode();

struct PrepareArgs {
  std::string images, masks, out;
  int tile = 224, stride = 224;
  int synthesize = -1;
  int size = 64;
  std::uint64_t seed = 0;
  std::string noise = "none";
};

struct TrainArgs {
  std::string config, data, out;
  int fold = 1;
};

struct EvalArgs {
  std::string checkpoint, config, data, split = "test", out;
  int bins = 20;
};

struct CompareArgs {
  std::string data, arch = "mtunet", config, out;
  std::vector<std::string> losses;
  long long epochs = 20;
  int fold = 1;
};

struct PredictArgs {
  std::string checkpoint, config, images, out;
};

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
  int window = 20;
  int tail = 100;
};

int cmd_prepare(const PrepareArgs& a);
int cmd_train(const TrainArgs& a);
int cmd_eval(const EvalArgs& a);
int cmd_compare_losses(const CompareArgs& a);
int cmd_predict(const PredictArgs& a);
int cmd_report(const ReportArgs& a);

}  // namespace cracknet::cli
