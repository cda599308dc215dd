// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "tialab/adapters.hpp"
#include "tialab/backbone.hpp"
#include "tialab/ops.hpp"

namespace {

using tialab::TensorF;

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(1);
  auto a = TensorF::uniform({n, n}, -1.0f, 1.0f, rng);
  auto b = TensorF::uniform({n, n}, -1.0f, 1.0f, rng);
  for (auto _ : state) benchmark::DoNotOptimize(tialab::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_DepthwiseConv(benchmark::State& state) {
  const int64_t t = state.range(0);
  std::mt19937_64 rng(2);
  auto x = TensorF::uniform({16, t, 8, 8}, -1.0f, 1.0f, rng);
  auto k = TensorF::uniform({16, 3}, -1.0f, 1.0f, rng);
  auto b = TensorF::zeros({16});
  for (auto _ : state) benchmark::DoNotOptimize(tialab::depthwise_temporal_conv(x, k, b));
}
BENCHMARK(BM_DepthwiseConv)->Arg(64)->Arg(256);

void BM_TiaForwardBackward(benchmark::State& state) {
  const int64_t t = state.range(0);
  auto w = tialab::adapters::init_tia<float>(64, 4, 3, 3);
  std::mt19937_64 rng(3);
  auto x = TensorF::uniform({t, 16, 64}, -1.0f, 1.0f, rng);
  for (auto _ : state) {
    auto loss = tialab::sum(tialab::adapters::tia_tokens(w, x, true));
    tialab::backward(loss);
    for (auto* p : w.parameters()) p->tensor.zero_grad();
  }
}
BENCHMARK(BM_TiaForwardBackward)->Arg(64)->Arg(256);

void BM_BackboneEncode(benchmark::State& state) {
  tialab::backbone::BackboneConfig cfg;
  cfg.dim = 32;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  tialab::backbone::Backbone<float> bb(cfg);
  std::mt19937_64 rng(4);
  auto video = TensorF::uniform({3, state.range(0), 8, 8}, -1.0f, 1.0f, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        tialab::backbone::encode_frame_repr<float>(bb, video, nullptr, tialab::backbone::EncodeMode::frozen()));
  }
}
BENCHMARK(BM_BackboneEncode)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
