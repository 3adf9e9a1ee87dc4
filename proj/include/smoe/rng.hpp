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

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace smoe {

// Seeded mt19937_64 stream with a draw counter. Uniform and normal variates
// are derived from raw 64-bit words here (not via <random> distributions) so
// draws are bit-identical across standard library implementations.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  // Independent child stream keyed by (seed, purpose); ignores draw state.
  RngStream fork(std::string_view purpose) const;
  RngStream fork(std::string_view purpose, std::uint64_t index) const;

  std::uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  double normal();                         // standard normal (Box-Muller)
  std::size_t index(std::size_t n);        // uniform in [0, n)
  bool bernoulli(double p);
  void shuffle(std::span<std::size_t> items);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }
  static constexpr std::string_view algorithm() { return "mt19937_64"; }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);

}  // namespace smoe
