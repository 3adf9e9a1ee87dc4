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

// Elitist evolutionary search over the routing hyperparameters.

#include <array>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "smoe/rng.hpp"

namespace smoe {

struct ParamRange {
  double lower = 0.0, upper = 1.0, sigma = 0.1;
};

enum class Gene { w, c, lambda_lb, lambda_ent, lambda_u };
inline constexpr std::size_t kGeneCount = 5;
const char* to_string(Gene g);

struct SearchSpace {
  ParamRange w{0.65, 0.85, 0.020};
  ParamRange c{1.05, 1.20, 0.015};
  ParamRange lambda_lb{0.01, 0.02, 0.001};
  ParamRange lambda_ent{0.015, 0.030, 0.002};
  ParamRange lambda_u{0.08, 0.15, 0.005};
  bool utility = false;

  const ParamRange& range(Gene g) const;
  ParamRange& range(Gene g);
  std::size_t active_genes() const { return utility ? 5 : 4; }
  // Throws std::invalid_argument unless lower < upper and sigma >= 0.
  void validate() const;
};

struct Genes {
  std::array<double, kGeneCount> v{};
  double& operator[](Gene g) { return v[static_cast<std::size_t>(g)]; }
  double operator[](Gene g) const { return v[static_cast<std::size_t>(g)]; }
};

struct EvalRecord {
  double accuracy = 0.0;       // fraction in [0, 1]
  double flops_reduction = 0.0;
  double gap = 0.0;
};

struct Individual {
  Genes genes;
  std::optional<double> fitness;
  std::optional<EvalRecord> record;
  std::size_t generation = 0, index = 0;
  std::string error;  // evaluator failure message, fitness is -inf
};

struct FitnessParams {
  double r_target = 0.2;
  double g_target = 0.02;
  double lambda_red = 5.0;
  double lambda_gap = 2.0;
};

double fitness(double acc, double r, double g, const FitnessParams& fp = {});

Individual random_individual(const SearchSpace& space, RngStream& rng);
// Gaussian perturbation per active gene, clipped to bounds; clears fitness.
Individual mutate(const Individual& ind, const SearchSpace& space, RngStream& rng);
bool in_bounds(const Genes& g, const SearchSpace& space);

struct Evaluation {
  double fitness = 0.0;
  std::optional<EvalRecord> record;
};

using Evaluator = std::function<Evaluation(const Genes&)>;

// Wraps a record-producing trainer with the fitness formula.
Evaluator fitness_evaluator(std::function<EvalRecord(const Genes&)> train, FitnessParams fp = {});

struct SearchConfig {
  std::size_t population = 6;
  std::size_t elites = 2;
  std::size_t budget = 14;
};

struct SearchResult {
  Individual best;
  std::vector<Individual> history;  // evaluation order, (generation, index)
  std::vector<double> best_by_generation;
};

// Generation 0 draws `population` uniform individuals; later generations
// keep the elites with their fitness and add population - elites mutated
// offspring, parents taken round-robin from the elites. Exactly `budget`
// evaluator calls; a throwing evaluator yields -inf fitness.
SearchResult run_search(const SearchSpace& space, const Evaluator& evaluator, RngStream rng,
                        const SearchConfig& cfg = {});

}  // namespace smoe
