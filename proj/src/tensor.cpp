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

#include "smoe/tensor.hpp"

#include <cmath>
#include <sstream>

namespace smoe {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Dtype dtype)
    : shape_(std::move(shape)), values_(shape_numel(shape_), 0.0), dtype_(dtype) {}

Tensor::Tensor(Shape shape, std::vector<double> values, Dtype dtype)
    : shape_(std::move(shape)), values_(std::move(values)), dtype_(dtype) {
  if (values_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor: " + std::to_string(values_.size()) + " values for shape " +
                     shape_string(shape_));
  }
  round_in_place();
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("tensor: item() on non-scalar " + shape_string(shape_));
  }
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != values_.size()) {
    throw ShapeError("tensor: cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::as_dtype(Dtype dtype) const {
  Tensor t = *this;
  t.dtype_ = dtype;
  t.round_in_place();
  return t;
}

void Tensor::fill(double value) {
  const double v = round_to(dtype_, value);
  for (auto& x : values_) x = v;
}

void Tensor::round_in_place() {
  if (dtype_ != Dtype::f32) return;
  for (auto& x : values_) x = round_to(Dtype::f32, x);
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(std::string_view where) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      std::ostringstream os;
      os << "non-finite value " << values_[i] << " at flat index " << i << " in " << where
         << " output " << shape_string(shape_);
      throw NumericError(os.str());
    }
  }
}

}  // namespace smoe
