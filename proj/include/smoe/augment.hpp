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

#include "smoe/rng.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

// In-place mirror of sample `b` of a [B x C x H x W] batch along width.
void hflip_sample(Tensor& x, std::size_t b);

// In-place crop of sample `b` from its zero-padded version. Offsets are in
// [0, 2*pad]; (pad, pad) reproduces the input.
void crop_sample(Tensor& x, std::size_t b, std::size_t pad, std::size_t off_y, std::size_t off_x);

struct AugmentConfig {
  bool flip = true;
  std::size_t crop_pad = 4;  // 0 disables cropping
};

// Per sample: flip with probability 1/2, then a uniform pad-and-crop offset.
// Draws three values per sample regardless of the outcome.
void augment_batch(Tensor& x, const AugmentConfig& cfg, RngStream& rng);

}  // namespace smoe
