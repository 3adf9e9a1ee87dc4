// Copyright 2026 The smoe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Serial vs OpenMP kernels at the shapes used by the CIFAR head and backbone,
// plus capacity-aware dispatch.

#include <benchmark/benchmark.h>

#include <vector>

#include "smoe/kernels.hpp"
#include "smoe/rng.hpp"
#include "smoe/routing.hpp"

namespace {

using namespace smoe;
namespace k = smoe::kernels;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
  k::GemmArgs g;
  g.m = static_cast<std::size_t>(state.range(0));
  g.k = static_cast<std::size_t>(state.range(1));
  g.n = static_cast<std::size_t>(state.range(2));
  g.trans_b = true;
  const auto a = random_values(g.m * g.k, 1), b = random_values(g.n * g.k, 2);
  std::vector<double> c(g.m * g.n);
  for (auto _ : state) {
    Gemm(g, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * g.m * g.n * g.k));
}

// Batch x first expert layer, then the 304-wide hidden layer.
#define GEMM_SHAPES Args({256, 1104, 304})->Args({256, 304, 304})->Args({64, 512, 1024})
BENCHMARK(BM_gemm<k::serial::gemm>)->Name("gemm/serial")->GEMM_SHAPES;
BENCHMARK(BM_gemm<k::parallel::gemm>)->Name("gemm/parallel")->GEMM_SHAPES;

k::ConvGeometry conv_shape(const benchmark::State& state) {
  k::ConvGeometry g;
  g.batch = 32;
  g.in_channels = g.out_channels = static_cast<std::size_t>(state.range(0));
  g.in_h = g.in_w = static_cast<std::size_t>(state.range(1));
  g.groups = state.range(2) ? g.in_channels : 1;
  return g;
}

template <auto Conv>
void BM_conv_forward(benchmark::State& state) {
  const k::ConvGeometry g = conv_shape(state);
  const auto x = random_values(g.batch * g.in_channels * g.in_h * g.in_w, 3);
  const auto w = random_values(g.out_channels * g.in_per_group() * 9, 4);
  std::vector<double> y(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : state) {
    Conv(g, x.data(), w.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Conv>
void BM_conv_backward_weight(benchmark::State& state) {
  const k::ConvGeometry g = conv_shape(state);
  const auto x = random_values(g.batch * g.in_channels * g.in_h * g.in_w, 5);
  const auto dy = random_values(g.batch * g.out_channels * g.out_h() * g.out_w(), 6);
  std::vector<double> dw(g.out_channels * g.in_per_group() * 9);
  for (auto _ : state) {
    Conv(g, x.data(), dy.data(), dw.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

// {channels, spatial, depthwise}
#define CONV_SHAPES Args({17, 32, 1})->Args({35, 16, 1})->Args({24, 32, 0})->Args({48, 16, 0})
BENCHMARK(BM_conv_forward<k::serial::conv2d_forward>)->Name("conv_forward/serial")->CONV_SHAPES;
BENCHMARK(BM_conv_forward<k::parallel::conv2d_forward>)->Name("conv_forward/parallel")->CONV_SHAPES;
BENCHMARK(BM_conv_backward_weight<k::serial::conv2d_backward_weight>)
    ->Name("conv_backward_weight/serial")
    ->CONV_SHAPES;
BENCHMARK(BM_conv_backward_weight<k::parallel::conv2d_backward_weight>)
    ->Name("conv_backward_weight/parallel")
    ->CONV_SHAPES;

void BM_dispatch_topk_capacity(benchmark::State& state) {
  const std::size_t b = 256, e = 8, kk = static_cast<std::size_t>(state.range(0));
  RngStream rng(7);
  Tensor probs({b, e}, Dtype::f64);
  for (std::size_t i = 0; i < b; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < e; ++j) z += probs[i * e + j] = rng.uniform(0.01, 1.0);
    for (std::size_t j = 0; j < e; ++j) probs[i * e + j] /= z;
  }
  const std::size_t cap = capacity({1.064, kk, e, b});
  for (auto _ : state) benchmark::DoNotOptimize(dispatch_topk_capacity(probs, kk, cap));
}
BENCHMARK(BM_dispatch_topk_capacity)->Arg(1)->Arg(2);

}  // namespace

BENCHMARK_MAIN();
