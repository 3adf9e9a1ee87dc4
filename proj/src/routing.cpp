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

#include "smoe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "smoe/layers.hpp"

namespace smoe {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected [B x E], got " +
                                      shape_string(t.shape()));
}

DispatchPlan empty_plan(std::size_t b, std::size_t e) {
  DispatchPlan plan;
  plan.batch = b;
  plan.experts = e;
  plan.mask.assign(b * e, 0);
  plan.combine = Tensor({b, e}, Dtype::f64);
  plan.per_expert_load.assign(e, 0);
  return plan;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

void renormalize_combine(DispatchPlan& plan, const Tensor& probs) {
  const std::size_t e = plan.experts;
  for (std::size_t b = 0; b < plan.batch; ++b) {
    double z = 0.0;
    for (std::size_t i = 0; i < e; ++i)
      if (plan.assigned(b, i)) z += probs[b * e + i];
    for (std::size_t i = 0; i < e; ++i) {
      if (!plan.assigned(b, i)) continue;
      // A zero-mass row keeps equal weights over its assignments.
      plan.combine[b * e + i] =
          z > 0.0 ? probs[b * e + i] / z : 1.0 / static_cast<double>(plan.row_assignments(b));
    }
  }
}

}  // namespace

RouterParams RouterParams::init(const std::string& name, std::size_t experts, std::size_t d_in,
                                std::size_t d_k, RngStream& rng, Dtype dtype) {
  if (experts < 1 || d_in < 1 || d_k < 1) {
    throw std::invalid_argument("router: experts, d_in and d_k must be >= 1");
  }
  RouterParams p;
  p.w_r = Parameter(name + ".w_r", he_uniform({experts, d_in}, d_in, rng, dtype));
  p.key_proj = Parameter(name + ".key_proj", he_uniform({d_k, d_in}, d_in, rng, dtype));
  p.keys = Parameter(name + ".keys", he_uniform({experts, d_k}, d_k, rng, dtype));
  p.utility.assign(experts, 0.0);
  return p;
}

Var route_scores(const Var& h, const RouterParams& params) {
  if (h.shape().size() != 2 || h.dim(1) != params.d_in()) {
    throw ShapeError("route_scores: features " + shape_string(h.shape()) + " for router with d_in " +
                     std::to_string(params.d_in()));
  }
  if (params.key_proj.value().dim(0) != params.d_k() ||
      params.key_proj.value().dim(1) != params.d_in()) {
    throw ShapeError("route_scores: key projection shape mismatch");
  }
  Var scores = matmul_nt(h, params.w_r.var());
  if (params.w_k != 0.0) {
    Var kh = matmul_nt(h, params.key_proj.var());
    scores = add(scores, scale(cosine_similarity(kh, params.keys.var(), params.cos_eps), params.w_k));
  }
  if (params.utility_bias_enabled && params.utility_weight != 0.0) {
    const std::size_t e = params.experts();
    if (params.utility.size() != e) throw ShapeError("route_scores: utility vector size");
    Tensor bias({e}, h.dtype());
    for (std::size_t i = 0; i < e; ++i) bias[i] = params.utility_weight * params.utility[i];
    scores = add_row_bias(scores, Var(std::move(bias), false));
  }
  return scores;
}

void update_utility(RouterParams& params, const std::vector<double>& grad_norms) {
  if (grad_norms.size() != params.experts()) throw ShapeError("update_utility: size mismatch");
  if (params.utility.size() != grad_norms.size()) params.utility.assign(grad_norms.size(), 0.0);
  for (std::size_t i = 0; i < grad_norms.size(); ++i) {
    params.utility[i] =
        params.utility_decay * params.utility[i] + (1.0 - params.utility_decay) * grad_norms[i];
  }
}

double schedule_tau(double t, const TemperatureSchedule& s) {
  if (!(s.tau_min > 0.0) || s.tau_max < s.tau_min) {
    throw std::invalid_argument("schedule_tau: need tau_max >= tau_min > 0");
  }
  if (!(s.horizon > 0.0)) throw std::invalid_argument("schedule_tau: horizon must be positive");
  if (!(t >= 0.0 && t <= s.horizon)) {
    throw std::out_of_range("schedule_tau: t=" + std::to_string(t) + " outside [0, " +
                            std::to_string(s.horizon) + "]");
  }
  const double u = t / s.horizon;
  const double span = s.tau_max - s.tau_min;
  if (s.kind == ScheduleKind::linear) {
    if (t == s.horizon) return s.tau_min;
    return s.tau_max - span * u;
  }
  const double g = logistic(-s.kappa * (u - 0.5));
  if (!s.clamp_endpoints) return s.tau_min + span * g;
  const double g0 = logistic(0.5 * s.kappa);
  const double g1 = logistic(-0.5 * s.kappa);
  return s.tau_min + span * (g - g1) / (g0 - g1);
}

std::size_t schedule_k(std::size_t epoch, const WarmupSchedule& ws) {
  if (epoch >= ws.warmup_epochs || ws.warmup_epochs == 0) return ws.k_final;
  const double ks = static_cast<double>(ws.k_start), kf = static_cast<double>(ws.k_final);
  const double v = ks - (ks - kf) * static_cast<double>(epoch) / static_cast<double>(ws.warmup_epochs);
  const auto lo = std::min(ws.k_start, ws.k_final), hi = std::max(ws.k_start, ws.k_final);
  return std::clamp(static_cast<std::size_t>(std::lround(v)), lo, hi);
}

std::size_t capacity(const CapacityConfig& cfg) {
  if (!(cfg.c > 0.0)) throw std::invalid_argument("capacity: c must be positive");
  if (cfg.experts < 1 || cfg.k < 1 || cfg.k > cfg.experts) {
    throw std::invalid_argument("capacity: need 1 <= k <= E");
  }
  if (cfg.batch < 1) throw std::invalid_argument("capacity: batch must be >= 1");
  const double raw = cfg.c * static_cast<double>(cfg.k * cfg.batch) / static_cast<double>(cfg.experts);
  // Absorb representation error so exact quotients are not bumped up.
  return static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

std::vector<std::size_t> DispatchPlan::rows_for(std::size_t i) const {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch; ++b)
    if (assigned(b, i)) rows.push_back(b);
  return rows;
}

std::size_t DispatchPlan::row_assignments(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < experts; ++i) n += mask[b * experts + i];
  return n;
}

std::size_t DispatchPlan::total_assignments() const {
  return std::accumulate(per_expert_load.begin(), per_expert_load.end(), std::size_t{0});
}

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, row.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return row[a] > row[b] || (row[a] == row[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

DispatchPlan dispatch_topk_capacity(const Tensor& probs, std::size_t k, std::size_t cap) {
  check_matrix(probs, "dispatch_topk_capacity");
  if (cap < 1) throw std::invalid_argument("dispatch_topk_capacity: cap must be >= 1");
  const std::size_t bsz = probs.dim(0), e = probs.dim(1);
  if (k < 1 || k > e) throw std::invalid_argument("dispatch_topk_capacity: need 1 <= k <= E");
  DispatchPlan plan = empty_plan(bsz, e);
  std::vector<std::size_t> used(e, 0);
  for (std::size_t b = 0; b < bsz; ++b) {
    std::span<const double> row(probs.data() + b * e, e);
    // Walk the full preference order; take the first k experts with room.
    const auto order = top_k_indices(row, e);
    std::size_t got = 0;
    for (std::size_t i : order) {
      if (got == k) break;
      if (used[i] < cap) {
        plan.mask[b * e + i] = 1;
        ++used[i];
        ++got;
      }
    }
    if (got == 0) {
      plan.mask[b * e + order.front()] = 1;
      ++used[order.front()];
      plan.overflow_rows.push_back(b);
    }
  }
  plan.per_expert_load = used;
  renormalize_combine(plan, probs);
  return plan;
}

DispatchPlan dispatch_topk(const Tensor& probs, std::size_t k) {
  check_matrix(probs, "dispatch_topk");
  return dispatch_topk_capacity(probs, k, std::max<std::size_t>(1, probs.dim(0)));
}

DispatchPlan dispatch_expert_choice(const Tensor& scores, std::size_t cap,
                                    ExpertChoiceBasis basis) {
  check_matrix(scores, "dispatch_expert_choice");
  if (cap < 1) throw std::invalid_argument("dispatch_expert_choice: cap must be >= 1");
  const std::size_t bsz = scores.dim(0), e = scores.dim(1);
  DispatchPlan plan = empty_plan(bsz, e);

  Tensor rank_by = scores.as_dtype(Dtype::f64);
  if (basis == ExpertChoiceBasis::probabilities) {
    for (std::size_t b = 0; b < bsz; ++b) {
      std::span<double> row(rank_by.data() + b * e, e);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double& v : row) z += (v = std::exp(v - mx));
      for (double& v : row) v /= z;
    }
  }

  const std::size_t take = std::min(cap, bsz);
  std::vector<std::size_t> order(bsz);
  for (std::size_t i = 0; i < e; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double va = rank_by[a * e + i], vb = rank_by[b * e + i];
                        return va > vb || (va == vb && a < b);
                      });
    for (std::size_t r = 0; r < take; ++r) plan.mask[order[r] * e + i] = 1;
  }
  for (std::size_t b = 0; b < bsz; ++b) {
    if (plan.row_assignments(b) > 0) continue;
    plan.mask[b * e + argmax(std::span<const double>(scores.data() + b * e, e))] = 1;
    plan.overflow_rows.push_back(b);
  }
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t i = 0; i < e; ++i) plan.per_expert_load[i] += plan.mask[b * e + i];

  // Per-sample softmax of scores over the selecting experts.
  for (std::size_t b = 0; b < bsz; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < e; ++i)
      if (plan.assigned(b, i)) mx = std::max(mx, scores[b * e + i]);
    double z = 0.0;
    for (std::size_t i = 0; i < e; ++i)
      if (plan.assigned(b, i)) z += plan.combine[b * e + i] = std::exp(scores[b * e + i] - mx);
    for (std::size_t i = 0; i < e; ++i) plan.combine[b * e + i] /= z;
  }
  return plan;
}

SlotEmbeddings SlotEmbeddings::init(const std::string& name, std::size_t experts, std::size_t d,
                                    RngStream& rng, Dtype dtype) {
  if (experts < 1 || d < 1) throw std::invalid_argument("slots: experts and d must be >= 1");
  Tensor t({experts, d}, Dtype::f64);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
  return SlotEmbeddings{Parameter(name + ".slots", t.as_dtype(dtype))};
}

SoftDispatch dispatch_soft_batch(const Var& x, const Var& slots) {
  if (x.shape().size() != 2 || slots.shape().size() != 2 || x.dim(1) != slots.dim(1)) {
    throw ShapeError("dispatch_soft_batch: inputs " + shape_string(x.shape()) + " and slots " +
                     shape_string(slots.shape()));
  }
  if (x.dim(0) < 1) throw ShapeError("dispatch_soft_batch: empty batch");
  SoftDispatch out;
  out.logits = matmul_nt(x, slots);
  out.dispatch = softmax(out.logits, 0);
  out.mixed = matmul(transpose(out.dispatch), x);
  out.combine = softmax(out.logits, 1);
  return out;
}

Var gate_per_sample(const Var& h, const Var& slots, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gate_per_sample: tau must be positive");
  if (h.shape().size() != 2 || slots.shape().size() != 2 || h.dim(1) != slots.dim(1)) {
    throw ShapeError("gate_per_sample: features " + shape_string(h.shape()) + " and slots " +
                     shape_string(slots.shape()));
  }
  return softmax(matmul_nt(h, slots), 1, tau);
}

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

RoutingStats routing_stats(const DispatchPlan& plan, const Tensor& probs) {
  check_matrix(probs, "routing_stats");
  if (probs.dim(0) != plan.batch || probs.dim(1) != plan.experts) {
    throw ShapeError("routing_stats: probs " + shape_string(probs.shape()) +
                     " do not match the plan");
  }
  const std::size_t e = plan.experts;
  RoutingStats s;
  s.f.assign(e, 0.0);
  s.p.assign(e, 0.0);
  const double total = static_cast<double>(plan.total_assignments());
  for (std::size_t i = 0; i < e; ++i) {
    s.f[i] = total > 0 ? static_cast<double>(plan.per_expert_load[i]) / total : 0.0;
  }
  for (std::size_t b = 0; b < plan.batch; ++b)
    for (std::size_t i = 0; i < e; ++i) s.p[i] += probs[b * e + i];
  for (auto& v : s.p) v /= static_cast<double>(std::max<std::size_t>(1, plan.batch));
  s.entropy = entropy_nats(s.p);
  return s;
}

std::vector<std::string> plan_violations(const DispatchPlan& plan, std::size_t max_per_row,
                                         std::size_t cap) {
  std::vector<std::string> out;
  const std::size_t e = plan.experts;
  if (plan.mask.size() != plan.batch * e || plan.combine.size() != plan.batch * e) {
    out.push_back("mask or combine has the wrong size");
    return out;
  }
  std::vector<std::size_t> col(e, 0), forced(e, 0);
  for (std::size_t b = 0; b < plan.batch; ++b) {
    const std::size_t n = plan.row_assignments(b);
    if (n < 1 || n > max_per_row) {
      out.push_back("row " + std::to_string(b) + " has " + std::to_string(n) + " assignments");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < e; ++i) {
      const double c = plan.combine[b * e + i];
      if (!plan.assigned(b, i) && c != 0.0) {
        out.push_back("combine nonzero off-mask at (" + std::to_string(b) + "," +
                      std::to_string(i) + ")");
      }
      if (c < 0.0) out.push_back("negative combine weight in row " + std::to_string(b));
      s += c;
      col[i] += plan.mask[b * e + i];
    }
    if (std::abs(s - 1.0) > 1e-6) out.push_back("combine row " + std::to_string(b) + " sums to " +
                                                std::to_string(s));
  }
  for (std::size_t b : plan.overflow_rows)
    for (std::size_t i = 0; i < e; ++i) forced[i] += plan.assigned(b, i) ? 1 : 0;
  for (std::size_t i = 0; i < e; ++i) {
    if (plan.per_expert_load[i] != col[i]) {
      out.push_back("load of expert " + std::to_string(i) + " differs from mask column sum");
    }
    if (cap > 0 && col[i] - forced[i] > cap) {
      out.push_back("expert " + std::to_string(i) + " exceeds capacity " + std::to_string(cap));
    }
  }
  return out;
}

}  // namespace smoe
