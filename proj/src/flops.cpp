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

#include "smoe/flops.hpp"

#include <algorithm>
#include <stdexcept>

namespace smoe {

namespace {

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw std::invalid_argument(std::string("flops: ") + what + " must be >= 1");
}

FlopCount mlp_flops(const std::vector<std::size_t>& layers) {
  FlopCount f = 0;
  for (std::size_t i = 1; i < layers.size(); ++i) f += flops_linear(layers[i - 1], layers[i]);
  return f;
}

}  // namespace

FlopCount flops_linear(std::size_t d_in, std::size_t d_out) {
  require_positive(d_in, "d_in");
  require_positive(d_out, "d_out");
  return 2ull * d_in * d_out;
}

FlopCount flops_conv(ConvKind kind, std::size_t c_in, std::size_t c_out, std::size_t h_out,
                     std::size_t w_out, std::size_t kernel) {
  require_positive(c_in, "c_in");
  require_positive(c_out, "c_out");
  require_positive(h_out, "h_out");
  require_positive(w_out, "w_out");
  if (kernel != conv_kernel_size(kind)) {
    throw std::invalid_argument(std::string("flops: unsupported kernel ") + std::to_string(kernel) +
                                " for " + to_string(kind));
  }
  const FlopCount hw = static_cast<FlopCount>(h_out) * w_out;
  switch (kind) {
    case ConvKind::standard3x3: return 2ull * kernel * kernel * c_in * c_out * hw;
    case ConvKind::depthwise3x3: return 2ull * kernel * kernel * c_in * hw;
    case ConvKind::pointwise1x1: return 2ull * c_in * c_out * hw;
  }
  throw std::invalid_argument("flops: unsupported conv kind");
}

FlopsReport flops_model(const BackboneSpec& backbone, const HeadFlopsSpec& head,
                        const InputShape& input) {
  FlopsReport r;
  auto add = [&r](std::string name, FlopCount f, ComponentRole role, bool routed) {
    r.per_component.push_back({std::move(name), f, role, routed});
  };

  std::size_t features = 0;
  switch (backbone.family) {
    case BackboneFamily::external:
      if (backbone.external_features == 0) throw ShapeError("flops: external backbone has no features");
      add("backbone", backbone.external_flops, ComponentRole::backbone, false);
      features = backbone.external_features;
      break;
    case BackboneFamily::identity:
      features = input.channels * input.height * input.width;
      break;
    case BackboneFamily::standard:
    case BackboneFamily::depthwise: {
      std::size_t c = input.channels, h = input.height, w = input.width;
      require_positive(c, "input channels");
      for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
        const std::size_t co = backbone.scaled_channels(i);
        const std::string name = "block" + std::to_string(i);
        const bool is_moe = std::find(backbone.moe_conv_positions.begin(),
                                      backbone.moe_conv_positions.end(),
                                      i) != backbone.moe_conv_positions.end();
        if (backbone.family == BackboneFamily::depthwise) {
          if (is_moe) throw std::invalid_argument("flops: expert banks need the standard family");
          add(name + ".dw", flops_conv(ConvKind::depthwise3x3, c, c, h, w, 3),
              ComponentRole::backbone, false);
          add(name + ".pw", flops_conv(ConvKind::pointwise1x1, c, co, h, w, 1),
              ComponentRole::backbone, false);
        } else if (is_moe) {
          const FlopCount one = flops_conv(ConvKind::standard3x3, c, co, h, w, 3);
          add(name + ".bank", one * backbone.moe_k, ComponentRole::backbone, true);
          if (head.count_router) {
            add(name + ".router", flops_linear(c, backbone.moe_experts), ComponentRole::router,
                false);
          }
        } else {
          add(name + ".conv", flops_conv(ConvKind::standard3x3, c, co, h, w, 3),
              ComponentRole::backbone, false);
        }
        c = co;
        if (backbone.blocks[i].pool) {
          if (h < 2 || w < 2) throw ShapeError("flops: block " + std::to_string(i) + " pools a " +
                                               std::to_string(h) + "x" + std::to_string(w) + " map");
          h /= 2;
          w /= 2;
        }
      }
      features = backbone.readout == Readout::flatten ? c * h * w : c;
      break;
    }
  }

  if (!head.layers.empty()) {
    if (head.layers.front() != features) {
      throw ShapeError("flops: head expects " + std::to_string(head.layers.front()) +
                       " features, backbone gives " + std::to_string(features));
    }
    add("head", mlp_flops(head.layers) * head.active_copies, ComponentRole::head, head.routed);
    if (head.count_router && head.router_experts > 0) {
      const std::size_t d = features, e = head.router_experts;
      FlopCount f = flops_linear(d, e);
      if (head.router_d_k > 0) f += flops_linear(d, head.router_d_k) + 2ull * head.router_d_k * e;
      add("head.router", f, ComponentRole::router, false);
    }
  }

  FlopCount backbone_total = 0, head_total = 0;
  for (const auto& c : r.per_component) {
    r.total += c.flops;
    if (c.routed) r.routed += c.flops;
    if (c.role == ComponentRole::backbone) backbone_total += c.flops;
    if (c.role == ComponentRole::head) head_total += c.flops;
  }
  if (r.total > 0) {
    const double t = static_cast<double>(r.total);
    r.rho = static_cast<double>(r.routed) / t;
    r.head_fraction = static_cast<double>(head_total) / t;
    r.conv_fraction = static_cast<double>(backbone_total) / t;
  }
  return r;
}

HeadFlopsSpec head_flops_spec(const ModelSpec& spec, const FlopsOptions& opts) {
  HeadFlopsSpec h;
  const std::size_t d = backbone_feature_dim(spec.backbone);
  h.count_router = opts.count_router;
  if (spec.use_moe) {
    const auto& m = spec.moe;
    h.layers = {d, m.hidden, m.hidden, spec.classes};
    switch (m.dispatch) {
      case DispatchKind::hard_topk:
      case DispatchKind::expert_choice: h.active_copies = std::max<std::size_t>(1, opts.k); break;
      // Soft kinds evaluate every expert; per-sample cost is bounded by E.
      case DispatchKind::soft_batch:
      case DispatchKind::per_sample_soft: h.active_copies = m.experts; break;
    }
    h.routed = opts.head_routed.value_or(true);
    h.router_experts = m.experts;
    h.router_d_k = m.w_k != 0.0 ? m.d_k : 0;
  } else {
    if (spec.dense.kind == DenseHeadKind::plain_fc) h.layers = {d, spec.classes};
    else h.layers = {d, 1024, spec.dense.hidden, spec.classes};
    h.routed = opts.head_routed.value_or(false);
  }
  return h;
}

FlopsReport flops_model(const ModelSpec& spec, const FlopsOptions& opts) {
  const InputShape in{spec.backbone.in_channels, spec.backbone.in_h, spec.backbone.in_w};
  return flops_model(spec.backbone, head_flops_spec(spec, opts), in);
}

double leverage_savings(double rho, double s) {
  if (!(rho >= 0.0 && rho <= 1.0) || !(s >= 0.0 && s <= 1.0)) {
    throw std::out_of_range("leverage_savings: rho and s must lie in [0, 1]");
  }
  return rho * s;
}

}  // namespace smoe
