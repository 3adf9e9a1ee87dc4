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

// JSON experiment documents: fail-closed parsing, canonical output and
// fingerprints.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "smoe/evosearch.hpp"
#include "smoe/experiment.hpp"
#include "smoe/flops.hpp"

namespace smoe {

inline constexpr int kConfigSchemaVersion = 1;

// what() starts with the dotted key path, e.g. "routing.tempature: unknown key".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& msg)
      : std::runtime_error(key + ": " + msg), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct SearchSettings {
  SearchConfig ga;
  SearchSpace space;
  FitnessParams fitness;
  std::size_t epochs = 5;  // per-candidate training length
  std::uint64_t seed = 42;
};

// Analytic cost settings for the flops command. k defaults to the
// experiment's final top-k; classes overrides the dataset's class count for
// cost-only models whose dataset is not loaded here.
struct FlopsSettings {
  bool count_router = false;
  std::optional<std::size_t> k;
  std::optional<bool> head_routed;
  std::optional<std::size_t> classes;
};

struct ConfigDocument {
  ExperimentConfig experiment = default_experiment_config();
  SearchSettings search;
  FlopsSettings flops;
};

FlopsOptions flops_options(const ConfigDocument& doc);

ConfigDocument parse_config(const std::string& text);
ConfigDocument load_config(const std::string& path);
std::string config_to_json(const ConfigDocument& doc, int indent = 2);

// FNV-1a 64 over the canonical document, excluding run.seeds and output,
// so every seed of one configuration shares a fingerprint.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace smoe
