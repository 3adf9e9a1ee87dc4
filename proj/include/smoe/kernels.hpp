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

#pragma once

// Data-parallel inner loops. Every kernel has a serial reference and an
// OpenMP version. Each output element is owned by exactly one thread and is
// accumulated in the same order as the serial loop, so the two backends are
// bit-identical.

#include <cstddef>

namespace smoe::kernels {

enum class Backend { serial, parallel };

Backend default_backend();
void set_default_backend(Backend backend);

// C[M x N] (+)= op(A)[M x K] * op(B)[K x N]; op transposes when the flag is set.
// A is stored M x K (or K x M when trans_a), B is stored K x N (or N x K).
struct GemmArgs {
  std::size_t m = 0, n = 0, k = 0;
  bool trans_a = false, trans_b = false;
  bool accumulate = false;
};

struct ConvGeometry {
  std::size_t batch = 0, in_channels = 0, in_h = 0, in_w = 0;
  std::size_t out_channels = 0, kernel = 3, stride = 1, padding = 1, groups = 1;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
};

namespace serial {
void gemm(const GemmArgs& g, const double* a, const double* b, double* c);
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw);
}  // namespace serial

namespace parallel {
void gemm(const GemmArgs& g, const double* a, const double* b, double* c);
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw);
}  // namespace parallel

// Dispatch on default_backend().
void gemm(const GemmArgs& g, const double* a, const double* b, double* c);
void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y);
void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx);
void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw);

}  // namespace smoe::kernels
