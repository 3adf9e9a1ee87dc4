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

// Command-line surface: presets, sweeps, search, cost reports and result
// aggregation. Exit codes are 0 on success, 2 for configuration or input
// errors and 3 when a run aborts.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/config.hpp"
#include "smoe/persist.hpp"

namespace smoe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitAbort = 3;

// Unusable report input: empty directory, mismatched fingerprints.
class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> preset_names();
std::string preset_description(const std::string& name);
// Throws ConfigError for an unknown name.
ConfigDocument preset(const std::string& name);

// Model spec for cost analysis without loading the dataset.
ModelSpec declared_model_spec(const ConfigDocument& doc);

enum class SweepAxis { rho, k, capacity, schedule };
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepCell {
  std::string name;  // directory name, e.g. cell_depthwise_512
  ExperimentConfig config;
};

// Throws ConfigError when the axis does not apply to the configuration.
std::vector<SweepCell> expand_sweep(const ExperimentConfig& base, SweepAxis axis);

// Runs job(0..n-1) on at most `jobs` worker threads. The first exception
// thrown by a job is rethrown after all workers finish.
void run_jobs(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& job);

struct CellReport {
  std::string path;  // relative to the input directory
  CellInfo info;
  std::vector<std::string> files;
  std::vector<RunResult> runs;
  bool has_stats = false;
  AggregateStats stats;
};

// Cells ordered by rho (cells without one last), then by path.
// gap_monotone_in_rho is keyed by experiment id and covers experiments with
// at least two aggregated cells that carry rho.
struct Report {
  std::vector<CellReport> cells;
  std::map<std::string, bool> gap_monotone_in_rho;
};

// Loads every directory holding seed_<n>.json files under `in_dir`. When
// `out_dir` is nonempty, writes per-cell aggregates, heatmap and trajectory
// tables, and the gap series.
Report build_report(const std::string& in_dir, const std::string& out_dir);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace smoe
