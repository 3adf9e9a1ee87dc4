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

// Router scores, schedules and dispatch plans for sparse and soft MoE.

#include <cstdint>
#include <string>
#include <vector>

#include "smoe/autograd.hpp"
#include "smoe/ops.hpp"
#include "smoe/rng.hpp"

namespace smoe {

struct RouterParams {
  Parameter w_r;       // [E x d_in]
  Parameter key_proj;  // K, [d_k x d_in]
  Parameter keys;      // e_i, [E x d_k]
  double w_k = 0.5;
  double cos_eps = 1e-8;  // 0 disables the norm floor
  bool utility_bias_enabled = false;
  double utility_weight = 0.0;
  double utility_decay = 0.9;
  std::vector<double> utility;  // EMA of per-expert gradient norms

  static RouterParams init(const std::string& name, std::size_t experts, std::size_t d_in,
                           std::size_t d_k, RngStream& rng, Dtype dtype = Dtype::f32);

  std::size_t experts() const { return w_r.value().dim(0); }
  std::size_t d_in() const { return w_r.value().dim(1); }
  std::size_t d_k() const { return keys.value().dim(1); }
  std::vector<Parameter> parameters() const { return {w_r, key_proj, keys}; }
};

// (W_r h)_i + w_k cos(K h, e_i) [+ lambda_u u_i], for every row of h.
Var route_scores(const Var& h, const RouterParams& params);

// u <- decay u + (1 - decay) g, one entry per expert.
void update_utility(RouterParams& params, const std::vector<double>& grad_norms);

enum class ScheduleKind { linear, sigmoid };
enum class ScheduleUnit { epoch, step };

struct TemperatureSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  double tau_max = 1.0;
  double tau_min = 0.13;
  double kappa = 7.0;
  double horizon = 1.0;  // T
  ScheduleUnit unit = ScheduleUnit::epoch;
  // Rescales the sigmoid so tau(0) = tau_max and tau(T) = tau_min exactly.
  bool clamp_endpoints = false;
};

double schedule_tau(double t, const TemperatureSchedule& sched);

struct WarmupSchedule {
  std::size_t warmup_epochs = 5;
  std::size_t k_start = 8;
  std::size_t k_final = 1;
};

std::size_t schedule_k(std::size_t epoch, const WarmupSchedule& ws);

struct CapacityConfig {
  double c = 1.0;
  std::size_t k = 1;
  std::size_t experts = 8;
  std::size_t batch = 1;
};

// ceil(c * k * B / E), identical for every expert.
std::size_t capacity(const CapacityConfig& cfg);

struct DispatchPlan {
  std::size_t batch = 0;
  std::size_t experts = 0;
  std::vector<std::uint8_t> mask;  // [B x E], row-major
  Tensor combine;                  // [B x E], f64
  std::vector<std::size_t> overflow_rows;
  std::vector<std::size_t> per_expert_load;

  bool assigned(std::size_t b, std::size_t i) const { return mask[b * experts + i] != 0; }
  // Samples routed to expert i, ascending.
  std::vector<std::size_t> rows_for(std::size_t i) const;
  std::size_t row_assignments(std::size_t b) const;
  std::size_t total_assignments() const;
};

// Top-k experts of one row by descending value, lower index first on ties.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);

// Greedy capacity-aware top-k over ascending batch index. Each sample takes
// the first k experts in its preference order that still have room. A sample
// that finds every expert full is force-assigned to its top-1 and listed in
// overflow_rows.
DispatchPlan dispatch_topk_capacity(const Tensor& probs, std::size_t k, std::size_t cap);

// Pure top-k without a capacity limit.
DispatchPlan dispatch_topk(const Tensor& probs, std::size_t k);

enum class ExpertChoiceBasis {
  raw_scores,     // experts rank samples by score column
  probabilities,  // experts rank samples by per-sample softmax column
};

// Each expert picks its top-cap samples; combine is a per-sample softmax of
// scores over the selecting experts. Unpicked samples go to their argmax.
DispatchPlan dispatch_expert_choice(const Tensor& scores, std::size_t cap,
                                    ExpertChoiceBasis basis = ExpertChoiceBasis::raw_scores);

struct SlotEmbeddings {
  Parameter slots;  // [E x d]

  static SlotEmbeddings init(const std::string& name, std::size_t experts, std::size_t d,
                             RngStream& rng, Dtype dtype = Dtype::f32);
  std::size_t experts() const { return slots.value().dim(0); }
};

struct SoftDispatch {
  Var logits;   // phi[B x E] = x s^T
  Var dispatch; // D, softmax of phi over the batch axis
  Var mixed;    // [E x d], mixed_j = sum_i D_ij x_i
  Var combine;  // softmax of phi over experts, used to return outputs
};

SoftDispatch dispatch_soft_batch(const Var& x, const Var& slots);

// softmax_E(h s^T / tau).
Var gate_per_sample(const Var& h, const Var& slots, double tau);

struct RoutingStats {
  std::vector<double> f;  // assignment fraction per expert
  std::vector<double> p;  // mean routing probability per expert
  double entropy = 0.0;   // H(p) in nats
};

RoutingStats routing_stats(const DispatchPlan& plan, const Tensor& probs);

// Shannon entropy in nats; zero entries contribute nothing.
double entropy_nats(std::span<const double> p);

// Invariant violations of a plan; empty when valid. `cap` of 0 skips the
// capacity check.
std::vector<std::string> plan_violations(const DispatchPlan& plan, std::size_t max_per_row,
                                         std::size_t cap);

}  // namespace smoe
