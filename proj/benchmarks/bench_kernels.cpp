// Hot kernels and whole-model inference. Float tensors, grad recording off,
// so the numbers reflect the inference path used for img/s.
#include <benchmark/benchmark.h>

#include <random>

#include "cracknet/attention.hpp"
#include "cracknet/models.hpp"
#include "cracknet/ops.hpp"

using namespace cracknet;
using TF = Tensor<float>;

namespace {

TF random_tensor(Shape shape, unsigned seed) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(gen);
  return TF(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

// 3x3 conv at stride 1, the UNet encoder workhorse
void BM_Conv3x3(benchmark::State& state) {
  const auto hw = state.range(0), c = state.range(1);
  auto x = random_tensor({1, hw, hw, c}, 3), w = random_tensor({3, 3, c, c}, 4), b = random_tensor({c}, 5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1));
  state.SetItemsProcessed(state.iterations() * 2 * hw * hw * 9 * c * c);
}
BENCHMARK(BM_Conv3x3)->Args({64, 16})->Args({56, 64})->Unit(benchmark::kMicrosecond);

void BM_WindowAttention(benchmark::State& state) {
  const auto hw = state.range(0), shift = state.range(1);
  ParamStore<float> store(6);
  auto p = attention::make_attention_params(store, "a", 96, 3);
  auto x = random_tensor({1, hw, hw, 96}, 7);
  const attention::WindowGeometry g{static_cast<int>(hw), static_cast<int>(hw), 7, static_cast<int>(shift)};
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(shift ? attention::sw_msa(x, p, g) : attention::w_msa(x, p, g));
}
BENCHMARK(BM_WindowAttention)->Args({56, 0})->Args({56, 3})->Unit(benchmark::kMillisecond);

void BM_GlobalAttention(benchmark::State& state) {
  const auto n = state.range(0);
  ParamStore<float> store(8);
  auto p = attention::make_attention_params(store, "a", 64, 4);
  auto x = random_tensor({n, 64}, 9);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(attention::multi_head_self_attention(x, p));
}
BENCHMARK(BM_GlobalAttention)->Arg(196)->Arg(784)->Unit(benchmark::kMillisecond);

void BM_ExternalAttention(benchmark::State& state) {
  ParamStore<float> store(10);
  auto mem = attention::make_external_memory(store, "e", 64, 128);
  auto x = random_tensor({3136, 128}, 11);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(attention::external_attention(x, mem));
}
BENCHMARK(BM_ExternalAttention)->Unit(benchmark::kMillisecond);

// toy presets at 64x64, batch 4: the scale the overfit runs use
void BM_ToyForward(benchmark::State& state) {
  const auto arch = static_cast<Arch>(state.range(0));
  Model<float> model(ModelConfig::preset(arch, Scale::Toy), 1);
  auto x = random_tensor({4, 64, 64, 3}, 12);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x));
  state.SetItemsProcessed(state.iterations() * 4);
  state.SetLabel(arch_name(arch));
}
BENCHMARK(BM_ToyForward)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
