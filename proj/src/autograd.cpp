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

#include "smoe/autograd.hpp"

#include <unordered_set>

namespace smoe {

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

void Node::accumulate(std::span<const double> g) {
  Tensor& buf = grad_buffer();
  if (g.size() != buf.size()) {
    throw ShapeError("autograd: gradient of size " + std::to_string(g.size()) +
                     " for value " + shape_string(value.shape()));
  }
  double* d = buf.data();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) {
    grad = Tensor(value.shape(), value.dtype());
  }
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->is_leaf = true;
}

Var make_result(const char* op, Tensor value, std::vector<Var> parents,
                std::function<void(Node&)> backward_fn) {
  value.round_in_place();
  value.check_finite(op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->is_leaf = false;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void backward(const Var& loss, bool retain_graph) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  Node* root = loss.node().get();
  if (root->consumed) throw GraphError("backward: graph already consumed");
  if (!root->requires_grad) {
    throw GraphError("backward: loss does not depend on any parameter");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        if (!p->is_leaf && p->consumed) throw GraphError("backward: graph already consumed");
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf) n->grad = Tensor(n->value.shape(), n->value.dtype());
  }
  root->grad_buffer()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }

  for (Node* n : order) {
    if (n->is_leaf) {
      n->grad.round_in_place();
      n->grad.check_finite("backward");
    }
  }

  if (!retain_graph) {
    for (Node* n : order) {
      if (n->is_leaf) continue;
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad = Tensor();
      n->consumed = true;
    }
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Parameter::Parameter(std::string name, Tensor value, bool trainable)
    : name_(std::move(name)), var_(std::move(value), trainable) {
  var_.node()->grad_buffer();
}

void Parameter::zero_grad() { var_.node()->grad_buffer().fill(0.0); }

void zero_grads(std::span<Parameter> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace smoe
