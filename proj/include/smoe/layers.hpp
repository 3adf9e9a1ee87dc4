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

#include <string>
#include <vector>

#include "smoe/autograd.hpp"
#include "smoe/ops.hpp"
#include "smoe/rng.hpp"

namespace smoe {

// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(Shape shape, std::size_t fan_in, RngStream& rng, Dtype dtype = Dtype::f32);

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, RngStream& rng,
         Dtype dtype = Dtype::f32, bool bias = true);

  Var forward(const Var& x) const;  // [n x in] -> [n x out]
  std::vector<Parameter> parameters() const;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter& weight() { return weight_; }  // stored [out x in]
  Parameter& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  bool has_bias_ = true;
  Parameter weight_, bias_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, ConvKind kind, std::size_t in_channels, std::size_t out_channels,
         RngStream& rng, Dtype dtype = Dtype::f32, bool bias = true);

  Var forward(const Var& x) const;
  std::vector<Parameter> parameters() const;

  ConvKind kind() const { return kind_; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  Parameter& weight() { return weight_; }
  const Parameter& weight() const { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  ConvKind kind_ = ConvKind::standard3x3;
  std::size_t in_ = 0, out_ = 0;
  bool has_bias_ = true;
  Parameter weight_, bias_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels, Dtype dtype = Dtype::f32);

  Var forward(const Var& x, bool training);
  std::vector<Parameter> parameters() const;
  const BatchNormState& state() const { return state_; }

 private:
  Parameter gamma_, beta_;
  BatchNormState state_;
};

class Dropout {
 public:
  explicit Dropout(double p = 0.0);
  Var forward(const Var& x, bool training, RngStream& rng) const;
  double p() const { return p_; }

 private:
  double p_;
};

void append(std::vector<Parameter>& dst, const std::vector<Parameter>& src);

}  // namespace smoe
