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

#include <catch2/catch_amalgamated.hpp>

#include "smoe/flops.hpp"

using namespace smoe;
using Catch::Approx;

namespace {

BackboneSpec cifar_dw() {
  BackboneSpec b;
  b.family = BackboneFamily::depthwise;
  b.blocks = {{24}, {48}, {96}};
  b.width = 0.72;
  return b;
}

}  // namespace

TEST_CASE("linear and conv counts", "[flops]") {
  CHECK(flops_linear(512, 1000) == 1024000);
  CHECK(flops_linear(1, 1) == 2);
  CHECK_THROWS_AS(flops_linear(0, 3), std::invalid_argument);
  CHECK_THROWS_AS(flops_linear(3, 0), std::invalid_argument);

  CHECK(flops_conv(ConvKind::standard3x3, 1, 1, 1, 1, 3) == 18);
  CHECK(flops_conv(ConvKind::pointwise1x1, 7, 7, 5, 4, 1) == 2 * 49 * 20);
  CHECK(flops_conv(ConvKind::depthwise3x3, 4, 4, 2, 2, 3) == 2 * 9 * 4 * 4);
  CHECK_THROWS_AS(flops_conv(ConvKind::standard3x3, 1, 1, 1, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(flops_conv(ConvKind::pointwise1x1, 0, 1, 1, 1, 1), std::invalid_argument);

  for (std::size_t cin = 1; cin < 40; ++cin)
    for (std::size_t cout = 2; cout < 40; ++cout) {
      const FlopCount sep = flops_conv(ConvKind::depthwise3x3, cin, cin, 8, 8, 3) +
                            flops_conv(ConvKind::pointwise1x1, cin, cout, 8, 8, 1);
      CHECK(sep < flops_conv(ConvKind::standard3x3, cin, cout, 8, 8, 3));
    }
}

TEST_CASE("compact depthwise network decomposition", "[flops]") {
  BackboneSpec b = cifar_dw();
  HeadFlopsSpec head{{1104, 304, 304, 10}, 1, true};
  FlopsReport r = flops_model(b, head, {});
  // dw + pw per block at 32, 16 and 8 pixels per side.
  const FlopCount conv = 2 * 9 * 3 * 1024 + 2 * 3 * 17 * 1024 + 2 * 9 * 17 * 256 +
                         2 * 17 * 35 * 256 + 2 * 9 * 35 * 64 + 2 * 35 * 69 * 64;
  const FlopCount mlp = 2 * (1104 * 304 + 304 * 304 + 304 * 10);
  CHECK(conv == 892160);
  CHECK(mlp == 862144);
  CHECK(r.total == conv + mlp);
  CHECK(r.routed == mlp);
  CHECK(r.head_fraction == Approx(0.4914).margin(1e-4));
  CHECK(std::abs(r.head_fraction - 0.487) <= 0.02);
  CHECK(r.conv_fraction + r.head_fraction == Approx(1.0));
  CHECK(r.per_component.size() == 7);

  FlopCount sum = 0;
  for (const auto& c : r.per_component) sum += c.flops;
  CHECK(sum == r.total);
}

TEST_CASE("large external backbone leaves a tiny routed share", "[flops]") {
  BackboneSpec b;
  b.family = BackboneFamily::external;
  b.external_flops = 1800000000ull;
  b.external_features = 512;
  FlopsReport r = flops_model(b, HeadFlopsSpec{{512, 1000}, 1, true}, {3, 224, 224});
  CHECK(r.routed == 1024000);
  CHECK(r.rho * 100.0 == Approx(0.0569).margin(1e-4));
  CHECK(std::abs(r.rho * 100.0 - 0.06) <= 0.01);

  FlopsReport zero = flops_model(b, HeadFlopsSpec{}, {3, 224, 224});
  CHECK(zero.rho == 0.0);
  CHECK_THROWS_AS(flops_model(b, HeadFlopsSpec{{256, 10}}, {}), ShapeError);
}

TEST_CASE("model specs map onto head costs", "[flops]") {
  ModelSpec m;
  m.backbone = cifar_dw();
  m.moe.hidden = 304;
  FlopsReport top1 = flops_model(m);
  FlopsReport top2 = flops_model(m, FlopsOptions{false, 2});
  CHECK(top2.routed == 2 * top1.routed);
  FlopsReport with_router = flops_model(m, FlopsOptions{true, 1});
  CHECK(with_router.total == top1.total + 2 * 1104 * 8 + 2 * 1104 * 64 + 2 * 64 * 8);
  CHECK(with_router.routed == top1.routed);

  m.use_moe = false;
  CHECK(flops_model(m).rho == 0.0);
  FlopsOptions o;
  o.head_routed = true;
  CHECK(flops_model(m, o).routed == flops_linear(1104, 10));
  m.dense.kind = DenseHeadKind::mlp_1024_h;
  CHECK(flops_model(m).total ==
        892160 + flops_linear(1104, 1024) + flops_linear(1024, 304) + flops_linear(304, 10));
}

TEST_CASE("expert conv banks are the routed share", "[flops]") {
  BackboneSpec b;
  b.family = BackboneFamily::standard;
  b.blocks = {{8}, {16}};
  b.moe_conv_positions = {1};
  b.moe_k = 2;
  FlopsReport r = flops_model(b, HeadFlopsSpec{{16 * 64, 10}}, {});
  CHECK(r.routed == 2 * flops_conv(ConvKind::standard3x3, 8, 16, 16, 16, 3));
  CHECK(r.total == flops_conv(ConvKind::standard3x3, 3, 8, 32, 32, 3) + r.routed +
                       flops_linear(1024, 10));
  b.family = BackboneFamily::depthwise;
  CHECK_THROWS_AS(flops_model(b, HeadFlopsSpec{}, {}), std::invalid_argument);
}

TEST_CASE("depthwise conversion raises the head share", "[flops][property]") {
  RngStream rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    BackboneSpec s;
    s.family = BackboneFamily::standard;
    const std::size_t nb = 1 + rng.index(4);
    for (std::size_t i = 0; i < nb; ++i) s.blocks.push_back({2 + rng.index(128)});
    s.readout = rng.uniform() < 0.5 ? Readout::flatten : Readout::global_avg_pool;
    s.in_h = s.in_w = 32;
    const std::size_t d = backbone_feature_dim(s);
    HeadFlopsSpec head{{d, 1 + rng.index(512), 10}};
    FlopsReport a = flops_model(s, head, {});
    s.family = BackboneFamily::depthwise;
    FlopsReport b = flops_model(s, head, {});
    CHECK(b.conv_fraction < a.conv_fraction);
    CHECK(b.total - b.per_component.back().flops < a.total - a.per_component.back().flops);
    CHECK(b.head_fraction > a.head_fraction);
    CHECK(a.rho >= 0.0);
    CHECK(a.rho <= 1.0);
  }
}

TEST_CASE("leverage savings", "[flops]") {
  CHECK(leverage_savings(0.487, 0.43) == Approx(0.2094).margin(1e-4));
  CHECK(std::abs(leverage_savings(0.487, 0.43) - 0.209) <= 0.005);
  CHECK(leverage_savings(0.3, 0.0) == 0.0);
  CHECK(leverage_savings(1.0, 1.0) == 1.0);
  CHECK_THROWS_AS(leverage_savings(1.1, 0.5), std::out_of_range);
  CHECK_THROWS_AS(leverage_savings(0.5, -0.1), std::out_of_range);
  RngStream rng(2);
  for (int i = 0; i < 500; ++i) {
    const double r = rng.uniform(), s = rng.uniform(), d = rng.uniform() * (1 - std::max(r, s));
    CHECK(leverage_savings(r + d, s) >= leverage_savings(r, s));
    CHECK(leverage_savings(r, s + d) >= leverage_savings(r, s));
  }
}
