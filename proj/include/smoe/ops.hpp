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

// Differentiable tensor ops. Each returns a Var whose backward rule is
// registered with the graph when any input requires a gradient.

#include <cstdint>
#include <span>
#include <stdexcept>

#include "smoe/autograd.hpp"
#include "smoe/rng.hpp"

namespace smoe {

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class ConvKind { standard3x3, depthwise3x3, pointwise1x1 };

std::size_t conv_kernel_size(ConvKind kind);
const char* to_string(ConvKind kind);

// Linear algebra.
Var matmul(const Var& a, const Var& b);     // [m x k] * [k x n]
Var matmul_nt(const Var& a, const Var& b);  // [m x k] * [n x k]^T
Var transpose(const Var& x);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_n(std::span<const Var> xs);
Var add_row_bias(const Var& x, const Var& bias);      // [n x d] + [d]
Var add_channel_bias(const Var& x, const Var& bias);  // [B x C x H x W] + [C]
Var relu(const Var& x);

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);
Var column_mean(const Var& x);                      // [B x E] -> [E]
Var dot(const Var& x, std::span<const double> c);   // sum_i x_i c_i
Var sum_x_log_x(const Var& p);                      // sum p ln p, 0 ln 0 := 0

// Layers.
Var dropout(const Var& x, double p, bool training, RngStream& rng);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
                bool training);

Var maxpool2x2(const Var& x);
Var global_avg_pool(const Var& x);  // [B x C x H x W] -> [B x C]

// Softmax of x / temperature along axis 0 or 1 of a rank-2 tensor.
Var softmax(const Var& x, std::size_t axis, double temperature = 1.0);
// Mean negative log-likelihood over rows; targets index columns.
Var cross_entropy(const Var& logits, std::span<const int> targets);

Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t padding,
           std::size_t groups);
// Checks channel counts against the kind, then runs conv2d.
Var conv_forward(const Var& x, ConvKind kind, const Var& w, std::size_t stride,
                 std::size_t padding);

// Shape and indexing along dim 0.
Var reshape(const Var& x, Shape shape);
Var flatten(const Var& x);  // [B x ...] -> [B x rest]
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t n);
Var concat_rows(std::span<const Var> parts);
Var column(const Var& x, std::size_t j);       // [B x E] -> [B]
Var scale_rows(const Var& x, const Var& w);    // x[n x ...] * w[n]

// Routing helpers.
// cos(a_b, b_e) with each norm floored at eps. eps == 0 with a zero norm throws
// DegenerateInputError.
Var cosine_similarity(const Var& a, const Var& b, double eps);
// C = M p / sum_j M p, row-wise. A row whose masked mass underflows to zero
// gets equal weights over its mask and no gradient; an empty mask row throws.
Var masked_renormalize(const Var& p, std::span<const std::uint8_t> mask);
// Softmax restricted to the masked entries of each row; zero elsewhere.
Var masked_softmax(const Var& s, std::span<const std::uint8_t> mask);

}  // namespace smoe
