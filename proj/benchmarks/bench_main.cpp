#include <benchmark/benchmark.h>

#include <random>

#include "harmony/baselines.hpp"
#include "harmony/edges.hpp"
#include "harmony/field.hpp"
#include "harmony/layers.hpp"
#include "harmony/phantom.hpp"

namespace {

harmony::Volume3D phantom(std::int64_t n) {
  harmony::PhantomSpec spec;
  spec.dims = {n, n, n};
  harmony::Rng rng(1);
  return harmony::generate_structure(spec, rng).clean;
}

void BM_CannyFixed(benchmark::State& state) {
  const auto v = phantom(state.range(0));
  harmony::CannyConfig cfg;
  const double high = 0.3 * v.max();
  for (auto _ : state) benchmark::DoNotOptimize(harmony::canny_3d(v, high, cfg));
  state.SetItemsProcessed(state.iterations() * v.size());
}
BENCHMARK(BM_CannyFixed)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_AdaptiveEdges(benchmark::State& state) {
  const auto v = phantom(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(harmony::adaptive_edge_detect(v, {}));
}
BENCHMARK(BM_AdaptiveEdges)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Conv3d(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const harmony::nn::ConvShape s{c, c, 3, harmony::nn::Padding::zero};
  harmony::Tensor<float> in(c, {32, 32, 32});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& x : in.storage()) x = u(rng);
  std::vector<float> w(static_cast<std::size_t>(s.weight_count())), b(static_cast<std::size_t>(c), 0.0f);
  for (auto& x : w) x = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(harmony::nn::conv3d<float>(in, s, w, b));
  state.SetItemsProcessed(state.iterations() * in.voxels() * s.weight_count());
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_FieldForward(benchmark::State& state) {
  harmony::Architecture a;
  a.base_width = state.range(0);
  harmony::Rng rng(3);
  const harmony::VelocityField<float> field(a, harmony::init_params<float>(a, rng));
  harmony::Tensor<float> in(5, {32, 32, 32}, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(field.forward(in, 0.5));
}
BENCHMARK(BM_FieldForward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Dct3(benchmark::State& state) {
  const auto v = phantom(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(harmony::dct3(v));
}
BENCHMARK(BM_Dct3)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
