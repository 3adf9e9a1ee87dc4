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

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "smoe/tensor.hpp"

namespace smoe {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  // Adds `g` into this node's grad, allocating zeros first if needed.
  void accumulate(std::span<const double> g);
  Tensor& grad_buffer();
};

// Handle to a node in the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  Dtype dtype() const { return node_->value.dtype(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a result node. When gradients are disabled or no parent requires
// them, the backward rule and parent links are dropped. The value is rounded
// to its dtype and checked for finiteness under `op`.
Var make_result(const char* op, Tensor value, std::vector<Var> parents,
                std::function<void(Node&)> backward_fn);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Frees the graph unless retain_graph is set; a second call on a freed graph
// throws GraphError.
void backward(const Var& loss, bool retain_graph = false);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Trainable leaf. Copies share value and grad.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);

  const std::string& name() const { return name_; }
  const Var& var() const { return var_; }
  Tensor& value() { return var_.mutable_value(); }
  const Tensor& value() const { return var_.value(); }
  Tensor& grad() { return var_.node()->grad_buffer(); }
  bool trainable() const { return var_.requires_grad(); }
  void zero_grad();

 private:
  std::string name_;
  Var var_;
};

void zero_grads(std::span<Parameter> params);

}  // namespace smoe
