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
#include <stdexcept>
#include <vector>

#include "smoe/autograd.hpp"

namespace smoe {

class OptimizerError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OptimizerKind { adam, sgd_momentum };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;
  bool cosine = false;
  std::uint64_t total_steps = 0;  // cosine horizon
  double lr_floor = 0.0;
};

// lr at `step` of a cosine decay from cfg.lr to cfg.lr_floor over
// cfg.total_steps; constant when cosine is off.
double scheduled_lr(const OptimizerConfig& cfg, std::uint64_t step);

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, const std::vector<Parameter>& params);

  // Applies one update from the current grads. Frozen parameters are skipped.
  void step(std::vector<Parameter>& params);

  double current_lr() const { return scheduled_lr(cfg_, steps_); }
  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<Tensor>& first_moments() const { return m_; }

 private:
  OptimizerConfig cfg_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> m_, v_;
  bool initialized_ = false;
};

}  // namespace smoe
