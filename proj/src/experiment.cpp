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

#include "smoe/experiment.hpp"

#include <algorithm>
#include <numeric>

#include "smoe/config.hpp"

namespace smoe {

const char* to_string(EvalMetric m) {
  return m == EvalMetric::final_epoch ? "final_epoch" : "peak_validation";
}

EvalMetric eval_metric_from_string(const std::string& s) {
  if (s == "final_epoch") return EvalMetric::final_epoch;
  if (s == "peak_validation") return EvalMetric::peak_validation;
  throw std::invalid_argument("unknown eval metric '" + s + "'");
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.dataset.kind = DatasetKind::cifar10_binary;
  c.model.backbone.family = BackboneFamily::depthwise;
  c.model.backbone.blocks = {{24}, {48}, {96}};
  c.model.backbone.width = 0.717;
  c.temperature.kind = ScheduleKind::sigmoid;
  c.temperature.tau_max = 1.0;
  c.temperature.tau_min = 0.13;
  c.temperature.kappa = 7.0;
  c.temperature.horizon = 0.0;
  return c;
}

ModelSpec resolve_model_spec(const ExperimentConfig& cfg, const Dataset& data, bool moe) {
  ModelSpec s = cfg.model;
  s.use_moe = moe && cfg.model.use_moe;
  if (!moe) s.backbone.moe_conv_positions.clear();
  s.classes = data.classes;
  if (s.backbone.family != BackboneFamily::external) {
    s.backbone.in_channels = data.channels;
    s.backbone.in_h = data.height;
    s.backbone.in_w = data.width;
  }
  if (!data.images() && (s.backbone.family == BackboneFamily::standard ||
                         s.backbone.family == BackboneFamily::depthwise)) {
    throw std::invalid_argument("experiment: convolutional backbone needs an image dataset");
  }
  return s;
}

double tau_at(const ExperimentConfig& cfg, std::size_t epoch, std::uint64_t step,
              std::uint64_t steps_per_epoch) {
  TemperatureSchedule s = cfg.temperature;
  const bool by_step = s.unit == ScheduleUnit::step;
  if (!(s.horizon > 0.0)) {
    const double total = by_step ? static_cast<double>(cfg.epochs * steps_per_epoch) : cfg.epochs;
    s.horizon = std::max(1.0, total - 1.0);
  }
  const double t = by_step ? static_cast<double>(step) : static_cast<double>(epoch);
  return schedule_tau(std::min(t, s.horizon), s);
}

std::size_t k_at(const ExperimentConfig& cfg, std::size_t epoch) {
  if (!cfg.warmup_enabled) return cfg.k;
  WarmupSchedule w = cfg.warmup;
  w.k_final = cfg.k;
  return schedule_k(epoch, w);
}

EvalOutput evaluate(Classifier& model, const Split& split, std::size_t batch, double tau,
                    std::size_t k) {
  NoGradGuard guard;
  EvalOutput out;
  const std::size_t n = split.size();
  const bool routed = model.moe_head() != nullptr;
  std::size_t correct = 0;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t b0 = 0; b0 < n; b0 += batch) {
    const std::size_t m = std::min(batch, n - b0);
    Batch b = make_batch(split, std::span<const std::size_t>(idx).subspan(b0, m));
    ForwardResult fr = model.forward(b.x, false, tau, k);
    const Tensor& logits = fr.logits.value();
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = logits.data() + i * c;
      if (static_cast<int>(std::max_element(row, row + c) - row) == b.y[i]) ++correct;
    }
    if (routed) out.top1.insert(out.top1.end(), fr.head->top1.begin(), fr.head->top1.end());
  }
  out.acc = n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return out;
}

CountMatrix routing_heatmap(Classifier& model, const Split& split, std::size_t classes,
                            std::size_t batch, double tau, std::size_t k) {
  MoEHead* head = model.moe_head();
  if (!head) throw std::invalid_argument("routing_heatmap: model has no routed head");
  EvalOutput e = evaluate(model, split, batch, tau, k);
  CountMatrix m(classes, std::vector<std::uint64_t>(head->experts(), 0));
  for (std::size_t i = 0; i < split.size(); ++i) ++m.at(static_cast<std::size_t>(split.y[i])).at(e.top1[i]);
  return m;
}

namespace {

struct StreamPair {
  RngStream data, augment;
};

StreamPair run_streams(std::uint64_t seed) {
  RngStream root(seed);
  return {root.fork("data"), root.fork("augment")};
}

// Fills `out` epoch by epoch so a throw leaves the completed epochs behind.
void train_side(const ExperimentConfig& cfg, const ModelSpec& spec, std::uint64_t seed,
                const Dataset& data, SideResult& out, Classifier* keep) {
  if (cfg.batch == 0 || cfg.epochs == 0) throw std::invalid_argument("experiment: zero batch or epochs");
  Classifier model(spec, RngStream(seed).fork("model"));
  const std::size_t n = data.train.size();
  const std::uint64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  OptimizerConfig oc = cfg.optimizer;
  if (oc.cosine && oc.total_steps == 0) oc.total_steps = steps_per_epoch * cfg.epochs;
  Optimizer opt(oc, model.parameters());
  StreamPair rng = run_streams(seed);
  const bool augment = cfg.augment_enabled && data.images();
  const std::size_t experts = spec.use_moe ? spec.moe.experts : 0;

  std::vector<std::size_t> order(n);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.data.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.k = k_at(cfg, epoch);
    rec.f.assign(experts, 0.0);
    rec.p.assign(experts, 0.0);
    double seen = 0.0, correct = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch, ++step) {
      const std::size_t m = std::min(cfg.batch, n - b0);
      Batch b = make_batch(data.train, std::span<const std::size_t>(order).subspan(b0, m));
      if (augment) augment_batch(b.x, cfg.augment, rng.augment);
      const double tau = tau_at(cfg, epoch, step, steps_per_epoch);
      rec.tau = tau;
      StepReport r = train_step(model, b, tau, rec.k, opt);
      rec.train_loss += r.loss * m;
      rec.lb += r.lb * m;
      rec.ent += r.ent * m;
      correct += r.acc * m;
      seen += m;
      rec.overflow += r.overflow;
      for (std::size_t i = 0; i < experts && i < r.stats.f.size(); ++i) {
        rec.f[i] += r.stats.f[i];
        rec.p[i] += r.stats.p[i];
      }
      ++batches;
    }
    rec.train_loss /= seen;
    rec.lb /= seen;
    rec.ent /= seen;
    rec.train_acc = 100.0 * correct / seen;
    for (std::size_t i = 0; i < experts; ++i) {
      rec.f[i] /= static_cast<double>(batches);
      rec.p[i] /= static_cast<double>(batches);
    }
    if (experts) rec.entropy = entropy_nats(rec.p);
    rec.test_acc = evaluate(model, data.test, cfg.batch, rec.tau, cfg.k).acc;
    rec.data_draws = rng.data.draws();
    rec.augment_draws = rng.augment.draws();
    out.epochs.push_back(std::move(rec));
    out.final_acc = out.epochs.back().test_acc;
    out.peak_acc = std::max(out.peak_acc, out.final_acc);
  }
  if (keep) *keep = std::move(model);
}

double reported(const SideResult& s, EvalMetric m) {
  return m == EvalMetric::final_epoch ? s.final_acc : s.peak_acc;
}

}  // namespace

SideResult train_model(const ExperimentConfig& cfg, const ModelSpec& spec, std::uint64_t seed,
                       const Dataset& data, Classifier* out_model) {
  SideResult s;
  train_side(cfg, spec, seed, data, s, out_model);
  return s;
}

RunResult run_pair(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& data) {
  RunResult r;
  r.experiment_id = cfg.experiment_id;
  r.seed = seed;
  r.config_hash = config_hash(cfg);
  const ModelSpec dense = resolve_model_spec(cfg, data, false);
  const ModelSpec moe = resolve_model_spec(cfg, data, true);
  Classifier trained;
  try {
    train_side(cfg, dense, seed, data, r.dense, nullptr);
    train_side(cfg, moe, seed, data, r.moe, &trained);
  } catch (const TrainingAbort& e) {
    r.aborted = true;
    r.abort_message = e.what();
    throw RunAbort(e.what(), r);
  } catch (const NumericError& e) {
    r.aborted = true;
    r.abort_message = e.what();
    throw RunAbort(e.what(), r);
  }

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const EpochRecord &a = r.dense.epochs[e], &b = r.moe.epochs[e];
    if (a.data_draws != b.data_draws || a.augment_draws != b.augment_draws) {
      throw std::logic_error("run_pair: dense and MoE consumed different random streams at epoch " +
                             std::to_string(e));
    }
  }
  r.dense_acc = reported(r.dense, cfg.metric);
  r.moe_acc = reported(r.moe, cfg.metric);
  r.gap = r.moe_acc - r.dense_acc;
  r.expert_usage = r.moe.epochs.back().f;
  if (trained.moe_head()) {
    const double tau = r.moe.epochs.back().tau;
    r.heatmap = routing_heatmap(trained, data.test, data.classes, cfg.batch, tau, cfg.k);
  }
  return r;
}

}  // namespace smoe
