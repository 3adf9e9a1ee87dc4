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

// Analytic inference cost model. One multiply-add counts as 2 FLOPs; biases,
// batch norm, activations and pooling are free.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smoe/moe.hpp"

namespace smoe {

using FlopCount = std::uint64_t;

FlopCount flops_linear(std::size_t d_in, std::size_t d_out);
// kernel must match kind (3 for the 3x3 kinds, 1 for pointwise).
FlopCount flops_conv(ConvKind kind, std::size_t c_in, std::size_t c_out, std::size_t h_out,
                     std::size_t w_out, std::size_t kernel);

enum class ComponentRole { backbone, head, router };

struct FlopsComponent {
  std::string name;
  FlopCount flops = 0;
  ComponentRole role = ComponentRole::backbone;
  bool routed = false;
};

struct FlopsReport {
  std::vector<FlopsComponent> per_component;
  FlopCount total = 0;
  FlopCount routed = 0;
  double rho = 0.0;
  double head_fraction = 0.0;
  double conv_fraction = 0.0;  // backbone share, external backbones included
};

// Per-sample head cost description. layers are consecutive widths, so
// {1104, 304, 304, 10} is three Linear layers; an empty list is a zero-cost head.
struct HeadFlopsSpec {
  std::vector<std::size_t> layers;
  std::size_t active_copies = 1;  // experts evaluated per sample
  bool routed = false;
  // Router cost, added only when count_router is set.
  std::size_t router_experts = 0, router_d_k = 0;
  bool count_router = false;
};

struct InputShape {
  std::size_t channels = 3, height = 32, width = 32;
};

FlopsReport flops_model(const BackboneSpec& backbone, const HeadFlopsSpec& head,
                        const InputShape& input);

struct FlopsOptions {
  bool count_router = false;
  // Inference-time k for hard routing; defaults to 1.
  std::size_t k = 1;
  // Treat a dense head as the routed component (cost studies of heads that
  // would be replaced by experts).
  std::optional<bool> head_routed;
};

HeadFlopsSpec head_flops_spec(const ModelSpec& spec, const FlopsOptions& opts = {});
FlopsReport flops_model(const ModelSpec& spec, const FlopsOptions& opts = {});

// Fraction of total FLOPs saved when the routed share rho shrinks by s.
double leverage_savings(double rho, double s);

}  // namespace smoe
