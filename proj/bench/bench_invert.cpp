#include <benchmark/benchmark.h>

#include <random>

#include "fincflow/invconv.hpp"

using namespace fincflow;

namespace {

Tensor<float> random_input(std::size_t c, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> normal;
  Tensor<float> y({1, c, n, n});
  for (auto& v : y.data()) v = normal(rng);
  return y;
}

void BM_BlockReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const auto pcb = MaskedKernel<float>::random(4, 3, Orientation::TL, rng);
  const auto y = random_input(4, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(pcb_invert_reference(y, pcb));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(y.size()));
}

void BM_BlockWavefront(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto workers = static_cast<int>(state.range(1));
  std::mt19937_64 rng(1);
  const auto pcb = MaskedKernel<float>::random(4, 3, Orientation::TL, rng);
  const auto y = random_input(4, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(pcb_invert_wavefront(y, pcb, workers));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(y.size()));
}

void BM_UnitReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const auto unit = FincFlowUnit<float>::random(8, 3, rng);
  const auto y = random_input(8, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(unit_invert_reference(y, unit));
}

void BM_UnitWavefront(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto workers = static_cast<int>(state.range(1));
  std::mt19937_64 rng(1);
  const auto unit = FincFlowUnit<float>::random(8, 3, rng);
  const auto y = random_input(8, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(unit_invert(y, unit, workers));
}

}  // namespace

BENCHMARK(BM_BlockReference)->RangeMultiplier(2)->Range(16, 128)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BlockWavefront)->ArgsProduct({{16, 32, 64, 128}, {1, 2, 4, 8}})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_UnitReference)->RangeMultiplier(2)->Range(16, 128)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_UnitWavefront)->ArgsProduct({{16, 32, 64, 128}, {1, 2, 4, 8}})->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
