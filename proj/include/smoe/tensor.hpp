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

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace smoe {

using Shape = std::vector<std::size_t>;

// Storage precision. Values live in a double buffer; f32 tensors are rounded
// to single precision after every write through an op.
enum class Dtype { f32, f64 };

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an op produces NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

inline double round_to(Dtype dtype, double v) {
  return dtype == Dtype::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

// Dense row-major array. Image layout is batch x channels x height x width.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Dtype dtype = Dtype::f32);
  Tensor(Shape shape, std::vector<double> values, Dtype dtype = Dtype::f32);

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::f32) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::f32);
  static Tensor scalar(double value, Dtype dtype = Dtype::f32) { return full({1}, value, dtype); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  Dtype dtype() const { return dtype_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  // Rank-2 accessors.
  double& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor as_dtype(Dtype dtype) const;
  void fill(double value);
  void round_in_place();

  bool all_finite() const;
  // Throws NumericError naming `where` if any value is NaN/Inf.
  void check_finite(std::string_view where) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<double> values_;
  Dtype dtype_ = Dtype::f32;
};

}  // namespace smoe
