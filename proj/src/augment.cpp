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

#include "smoe/augment.hpp"

#include <algorithm>
#include <vector>

namespace smoe {

namespace {

void check_image(const Tensor& x, std::size_t b, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected [B x C x H x W]");
  if (b >= x.dim(0)) throw std::out_of_range(std::string(op) + ": sample index");
}

}  // namespace

void hflip_sample(Tensor& x, std::size_t b) {
  check_image(x, b, "hflip_sample");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  double* base = x.data() + b * c * h * w;
  for (std::size_t r = 0; r < c * h; ++r) std::reverse(base + r * w, base + (r + 1) * w);
}

void crop_sample(Tensor& x, std::size_t b, std::size_t pad, std::size_t off_y,
                 std::size_t off_x) {
  check_image(x, b, "crop_sample");
  if (off_y > 2 * pad || off_x > 2 * pad) throw std::out_of_range("crop_sample: offset");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  double* base = x.data() + b * c * h * w;
  std::vector<double> src(base, base + c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        // Source coordinate in the unpadded image.
        const long sy = static_cast<long>(y + off_y) - static_cast<long>(pad);
        const long sx = static_cast<long>(xx + off_x) - static_cast<long>(pad);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) &&
                            sx < static_cast<long>(w);
        base[(ch * h + y) * w + xx] =
            inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)]
                   : 0.0;
      }
}

void augment_batch(Tensor& x, const AugmentConfig& cfg, RngStream& rng) {
  if (x.rank() != 4) return;  // feature vectors are not augmented
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    const bool flip = rng.uniform() < 0.5;
    const std::size_t span = 2 * cfg.crop_pad + 1;
    const std::size_t oy = rng.index(span);
    const std::size_t ox = rng.index(span);
    if (cfg.flip && flip) hflip_sample(x, b);
    if (cfg.crop_pad > 0) crop_sample(x, b, cfg.crop_pad, oy, ox);
  }
}

}  // namespace smoe
