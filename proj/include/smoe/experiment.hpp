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

// Matched dense-vs-MoE training runs with per-epoch telemetry.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/augment.hpp"
#include "smoe/data.hpp"
#include "smoe/moe.hpp"

namespace smoe {

enum class EvalMetric { final_epoch, peak_validation };

const char* to_string(EvalMetric m);
EvalMetric eval_metric_from_string(const std::string& s);

struct ExperimentConfig {
  std::string experiment_id = "cifar10-dev";
  DatasetHandle dataset;
  // MoE side. The dense side is the same spec with use_moe = false. Classes
  // and input shape are taken from the dataset at run time.
  ModelSpec model;
  // Final top-k; the warmup ramps from warmup.k_start down to it.
  std::size_t k = 1;
  bool warmup_enabled = true;
  WarmupSchedule warmup;
  // horizon <= 0 means epochs - 1 (epoch unit) or total steps - 1 (step unit).
  TemperatureSchedule temperature;
  OptimizerConfig optimizer;
  bool augment_enabled = true;  // image datasets only
  AugmentConfig augment;
  std::size_t epochs = 50;
  std::size_t batch = 256;
  std::vector<std::uint64_t> seeds{42, 123, 456, 777, 2025};
  EvalMetric metric = EvalMetric::final_epoch;
  std::string output_dir = "runs";
};

ExperimentConfig default_experiment_config();

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // percent
  double test_acc = 0.0;   // percent
  double tau = 1.0;
  std::size_t k = 1;
  double lb = 0.0, ent = 0.0;
  double entropy = 0.0;       // H of the epoch-mean routing distribution
  std::vector<double> f, p;   // epoch means of per-batch f_i and p_i
  std::uint64_t overflow = 0;
  std::uint64_t data_draws = 0, augment_draws = 0;
};

struct SideResult {
  std::vector<EpochRecord> epochs;
  double final_acc = 0.0, peak_acc = 0.0;  // percent
};

using CountMatrix = std::vector<std::vector<std::uint64_t>>;

struct RunResult {
  std::string experiment_id;
  std::uint64_t seed = 0;
  double dense_acc = 0.0, moe_acc = 0.0, gap = 0.0;  // percent, gap = moe - dense
  SideResult dense, moe;
  std::vector<double> expert_usage;  // final-epoch training f_i
  CountMatrix heatmap;               // classes x experts, test-time top-1
  std::string config_hash;
  bool aborted = false;
  std::string abort_message;
  std::string created_at;  // excluded from determinism comparisons
};

// Thrown by run_pair on a non-finite loss; carries the trajectories so far.
class RunAbort : public std::runtime_error {
 public:
  RunAbort(const std::string& what, RunResult partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const RunResult& partial() const { return partial_; }

 private:
  RunResult partial_;
};

struct EvalOutput {
  double acc = 0.0;  // percent
  std::vector<std::size_t> top1;  // per sample, empty without head routing
};

EvalOutput evaluate(Classifier& model, const Split& split, std::size_t batch, double tau,
                    std::size_t k);

// classes x experts counts of the test-time top-1 expert. Throws
// std::invalid_argument if the model has no routed head.
CountMatrix routing_heatmap(Classifier& model, const Split& split, std::size_t classes,
                            std::size_t batch, double tau, std::size_t k);

// Spec with dataset-derived classes and input shape filled in.
ModelSpec resolve_model_spec(const ExperimentConfig& cfg, const Dataset& data, bool moe);

double tau_at(const ExperimentConfig& cfg, std::size_t epoch, std::uint64_t step,
              std::uint64_t steps_per_epoch);
std::size_t k_at(const ExperimentConfig& cfg, std::size_t epoch);

// Trains the dense baseline and the MoE variant from one seed on identical
// data order and augmentation draws.
RunResult run_pair(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& data);

// One side only (used by the search evaluator and tests).
SideResult train_model(const ExperimentConfig& cfg, const ModelSpec& spec, std::uint64_t seed,
                       const Dataset& data, Classifier* out_model = nullptr);

}  // namespace smoe
