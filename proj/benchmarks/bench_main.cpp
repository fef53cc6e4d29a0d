// SPDX-License-Identifier: Apache-2.0
// Microbenchmarks for the hot paths: feature extraction, head forward, refinement.
#include <benchmark/benchmark.h>

#include "countadapt/adapters.hpp"
#include "countadapt/datagen.hpp"
#include "countadapt/features.hpp"
#include "countadapt/refiner.hpp"
#include "countadapt/regressor.hpp"

namespace {

using namespace countadapt;

void BM_ExtractPatch(benchmark::State& state) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(64, 1));
  const int size = static_cast<int>(state.range(0));
  const Scene s = gen_scene(builtin_domain("cell-like"), size, size, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ex.extract(s.pixels));
}
BENCHMARK(BM_ExtractPatch)->Arg(50)->Arg(100);

void BM_ExtractScene(benchmark::State& state) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(64, 1));
  const Scene s = gen_scene(builtin_domain("crowd-like"), 200, 200, 3);
  for (auto _ : state) benchmark::DoNotOptimize(extract_scene_features(ex, s, 50));
}
BENCHMARK(BM_ExtractScene)->Unit(benchmark::kMillisecond);

void BM_HeadForward(benchmark::State& state) {
  CountingModel model(64, 1);
  model.register_domain("d");
  const auto batch = static_cast<Eigen::Index>(state.range(0));
  const Matrix x = Matrix::Random(batch, 64).cwiseAbs();
  const Mode mode = state.range(1) ? Mode::train : Mode::infer;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x, "d", mode));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_HeadForward)->Args({16, 0})->Args({64, 0})->Args({64, 1})->Args({256, 1});

void BM_AdapterForward(benchmark::State& state) {
  AdapterModule m = init_adapter(256);
  m.gamma.setConstant(0.1);
  const Matrix x = Matrix::Random(64, 256);
  for (auto _ : state) benchmark::DoNotOptimize(adapter_forward(x, m, Mode::train));
}
BENCHMARK(BM_AdapterForward);

void BM_Refine(benchmark::State& state) {
  const auto net = RefinementNet::create_default(1);
  const int side = static_cast<int>(state.range(0));
  EstimateGrid g;
  g.shape = {side, side};
  g.values.assign(static_cast<std::size_t>(side) * side, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(refine(net, g));
}
BENCHMARK(BM_Refine)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
