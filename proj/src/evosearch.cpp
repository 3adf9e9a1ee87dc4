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

#include "smoe/evosearch.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace smoe {

const char* to_string(Gene g) {
  switch (g) {
    case Gene::w: return "w";
    case Gene::c: return "c";
    case Gene::lambda_lb: return "lambda_lb";
    case Gene::lambda_ent: return "lambda_ent";
    case Gene::lambda_u: return "lambda_u";
  }
  return "?";
}

const ParamRange& SearchSpace::range(Gene g) const {
  switch (g) {
    case Gene::w: return w;
    case Gene::c: return c;
    case Gene::lambda_lb: return lambda_lb;
    case Gene::lambda_ent: return lambda_ent;
    case Gene::lambda_u: return lambda_u;
  }
  throw std::invalid_argument("search space: unknown gene");
}

ParamRange& SearchSpace::range(Gene g) {
  return const_cast<ParamRange&>(static_cast<const SearchSpace&>(*this).range(g));
}

void SearchSpace::validate() const {
  for (std::size_t i = 0; i < active_genes(); ++i) {
    const Gene g = static_cast<Gene>(i);
    const ParamRange& r = range(g);
    if (!(r.lower < r.upper) || !(r.sigma >= 0.0)) {
      throw std::invalid_argument(std::string("search space: bad range for ") + to_string(g));
    }
  }
}

double fitness(double acc, double r, double g, const FitnessParams& fp) {
  return acc - fp.lambda_red * std::max(0.0, fp.r_target - r) -
         fp.lambda_gap * std::max(0.0, std::abs(g) - fp.g_target);
}

Individual random_individual(const SearchSpace& space, RngStream& rng) {
  Individual ind;
  for (std::size_t i = 0; i < space.active_genes(); ++i) {
    const ParamRange& r = space.range(static_cast<Gene>(i));
    ind.genes.v[i] = rng.uniform(r.lower, r.upper);
  }
  return ind;
}

Individual mutate(const Individual& ind, const SearchSpace& space, RngStream& rng) {
  Individual out;
  out.genes = ind.genes;
  for (std::size_t i = 0; i < space.active_genes(); ++i) {
    const ParamRange& r = space.range(static_cast<Gene>(i));
    const double z = rng.normal();
    out.genes.v[i] = std::clamp(ind.genes.v[i] + r.sigma * z, r.lower, r.upper);
  }
  return out;
}

bool in_bounds(const Genes& g, const SearchSpace& space) {
  for (std::size_t i = 0; i < space.active_genes(); ++i) {
    const ParamRange& r = space.range(static_cast<Gene>(i));
    if (!(g.v[i] >= r.lower && g.v[i] <= r.upper)) return false;
  }
  return true;
}

Evaluator fitness_evaluator(std::function<EvalRecord(const Genes&)> train, FitnessParams fp) {
  return [train = std::move(train), fp](const Genes& g) {
    EvalRecord rec = train(g);
    return Evaluation{fitness(rec.accuracy, rec.flops_reduction, rec.gap, fp), rec};
  };
}

namespace {

void evaluate(Individual& ind, const Evaluator& evaluator) {
  try {
    Evaluation e = evaluator(ind.genes);
    ind.fitness = std::isnan(e.fitness) ? -std::numeric_limits<double>::infinity() : e.fitness;
    ind.record = e.record;
  } catch (const std::exception& ex) {
    ind.fitness = -std::numeric_limits<double>::infinity();
    ind.error = ex.what();
  }
}

// Higher fitness first; earlier (generation, index) wins ties.
bool better(const Individual& a, const Individual& b) {
  if (*a.fitness != *b.fitness) return *a.fitness > *b.fitness;
  if (a.generation != b.generation) return a.generation < b.generation;
  return a.index < b.index;
}

}  // namespace

SearchResult run_search(const SearchSpace& space, const Evaluator& evaluator, RngStream rng,
                        const SearchConfig& cfg) {
  space.validate();
  if (cfg.population == 0 || cfg.elites == 0 || cfg.elites >= cfg.population) {
    throw std::invalid_argument("run_search: need 0 < elites < population");
  }
  if (cfg.budget < cfg.population) throw std::invalid_argument("run_search: budget below population");

  SearchResult res;
  RngStream init = rng.fork("init");
  std::vector<Individual> pop;
  for (std::size_t i = 0; i < cfg.population; ++i) {
    Individual ind = random_individual(space, init);
    ind.index = i;
    evaluate(ind, evaluator);
    res.history.push_back(ind);
    pop.push_back(ind);
  }

  std::size_t used = cfg.population;
  for (std::size_t gen = 0;; ++gen) {
    std::stable_sort(pop.begin(), pop.end(), better);
    res.best_by_generation.push_back(*pop.front().fitness);
    if (used >= cfg.budget) break;
    pop.resize(cfg.elites);
    RngStream mut = rng.fork("mutate", gen + 1);
    const std::size_t n = std::min(cfg.population - cfg.elites, cfg.budget - used);
    for (std::size_t j = 0; j < n; ++j) {
      Individual child = mutate(pop[j % cfg.elites], space, mut);
      child.generation = gen + 1;
      child.index = j;
      evaluate(child, evaluator);
      res.history.push_back(child);
      pop.push_back(child);
    }
    used += n;
  }
  res.best = pop.front();
  return res;
}

}  // namespace smoe
