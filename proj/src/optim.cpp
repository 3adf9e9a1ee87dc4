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

#include "smoe/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace smoe {

double scheduled_lr(const OptimizerConfig& cfg, std::uint64_t step) {
  if (!cfg.cosine || cfg.total_steps == 0) return cfg.lr;
  const double t = static_cast<double>(std::min(step, cfg.total_steps)) /
                   static_cast<double>(cfg.total_steps);
  return cfg.lr_floor + (cfg.lr - cfg.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

Optimizer::Optimizer(OptimizerConfig cfg, const std::vector<Parameter>& params)
    : cfg_(cfg), initialized_(true) {
  if (!(cfg_.lr > 0.0)) throw std::invalid_argument("optimizer: lr must be positive");
  for (const auto& p : params) {
    m_.push_back(Tensor::zeros(p.value().shape(), Dtype::f64));
    if (cfg_.kind == OptimizerKind::adam) v_.push_back(Tensor::zeros(p.value().shape(), Dtype::f64));
  }
}

void Optimizer::step(std::vector<Parameter>& params) {
  if (!initialized_) throw OptimizerError("optimizer: moment buffers not initialized");
  if (params.size() != m_.size()) {
    throw OptimizerError("optimizer: built for " + std::to_string(m_.size()) +
                         " parameters, stepped with " + std::to_string(params.size()));
  }
  const double lr = scheduled_lr(cfg_, steps_);
  ++steps_;
  const double t = static_cast<double>(steps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (m_[i].shape() != p.value().shape()) {
      throw OptimizerError("optimizer: moment buffer " + shape_string(m_[i].shape()) +
                           " does not match " + p.name() + " " + shape_string(p.value().shape()));
    }
    if (!p.trainable()) continue;
    Tensor& w = p.value();
    const Tensor& g = p.grad();
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = cfg_.momentum * m_[i][j] + g[j];
        w[j] -= lr * m_[i][j];
      }
    } else {
      const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
      const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    w.round_in_place();
    w.check_finite(p.name().c_str());
  }
}

}  // namespace smoe
