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

#include "smoe/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace smoe {

Tensor he_uniform(Shape shape, std::size_t fan_in, RngStream& rng, Dtype dtype) {
  if (fan_in == 0) throw ShapeError("he_uniform: fan_in is zero");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape), Dtype::f64);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t.as_dtype(dtype);
}

Linear::Linear(std::string name, std::size_t in, std::size_t out, RngStream& rng, Dtype dtype,
               bool bias)
    : in_(in), out_(out), has_bias_(bias) {
  weight_ = Parameter(name + ".weight", he_uniform({out, in}, in, rng, dtype));
  if (has_bias_) bias_ = Parameter(name + ".bias", Tensor::zeros({out}, dtype));
}

Var Linear::forward(const Var& x) const {
  if (x.shape().size() != 2 || x.dim(1) != in_) {
    throw ShapeError(weight_.name() + ": expected [n x " + std::to_string(in_) + "], got " +
                     shape_string(x.shape()));
  }
  Var y = matmul_nt(x, weight_.var());
  return has_bias_ ? add_row_bias(y, bias_.var()) : y;
}

std::vector<Parameter> Linear::parameters() const {
  std::vector<Parameter> out{weight_};
  if (has_bias_) out.push_back(bias_);
  return out;
}

Conv2d::Conv2d(std::string name, ConvKind kind, std::size_t in_channels, std::size_t out_channels,
               RngStream& rng, Dtype dtype, bool bias)
    : kind_(kind), in_(in_channels), out_(out_channels), has_bias_(bias) {
  const std::size_t k = conv_kernel_size(kind);
  std::size_t per_out = in_channels;
  if (kind == ConvKind::depthwise3x3) {
    if (out_channels != in_channels) {
      throw ShapeError(name + ": depthwise conv needs out_channels == in_channels");
    }
    per_out = 1;
  }
  weight_ = Parameter(name + ".weight",
                      he_uniform({out_channels, per_out, k, k}, per_out * k * k, rng, dtype));
  if (has_bias_) bias_ = Parameter(name + ".bias", Tensor::zeros({out_channels}, dtype));
}

Var Conv2d::forward(const Var& x) const {
  const std::size_t pad = kind_ == ConvKind::pointwise1x1 ? 0 : 1;
  Var y = conv_forward(x, kind_, weight_.var(), 1, pad);
  return has_bias_ ? add_channel_bias(y, bias_.var()) : y;
}

std::vector<Parameter> Conv2d::parameters() const {
  std::vector<Parameter> out{weight_};
  if (has_bias_) out.push_back(bias_);
  return out;
}

BatchNorm2d::BatchNorm2d(std::string name, std::size_t channels, Dtype dtype)
    : gamma_(name + ".gamma", Tensor::full({channels}, 1.0, dtype)),
      beta_(name + ".beta", Tensor::zeros({channels}, dtype)) {
  state_.running_mean = Tensor::zeros({channels}, Dtype::f64);
  state_.running_var = Tensor::full({channels}, 1.0, Dtype::f64);
}

Var BatchNorm2d::forward(const Var& x, bool training) {
  return batchnorm2d(x, gamma_.var(), beta_.var(), state_, training);
}

std::vector<Parameter> BatchNorm2d::parameters() const { return {gamma_, beta_}; }

Dropout::Dropout(double p) : p_(p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: p must be in [0,1), got " + std::to_string(p));
  }
}

Var Dropout::forward(const Var& x, bool training, RngStream& rng) const {
  return dropout(x, p_, training, rng);
}

void append(std::vector<Parameter>& dst, const std::vector<Parameter>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace smoe
