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

// Results files: one JSON document per run, per aggregate and per search.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/evosearch.hpp"
#include "smoe/experiment.hpp"
#include "smoe/flops.hpp"
#include "smoe/stats.hpp"

namespace smoe {

inline constexpr int kResultsSchemaVersion = 1;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_timestamp();

// Writes to `path` + ".tmp" then renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

std::string run_result_to_json(const RunResult& r);
// Throws SchemaError naming the first missing or mistyped key.
RunResult run_result_from_json(const std::string& text);
// Fills created_at when empty.
void persist(RunResult r, const std::string& path);
RunResult load_run(const std::string& path);

std::string aggregate_to_json(const AggregateStats& s);
AggregateStats aggregate_from_json(const std::string& text);
void persist(const AggregateStats& s, const std::string& path);
AggregateStats load_aggregate(const std::string& path);

// Statistics over run gaps (percentage points).
AggregateStats aggregate(const std::vector<RunResult>& runs);

std::string search_history_to_json(const SearchResult& r, const SearchSpace& space);
std::string flops_report_to_json(const FlopsReport& r);

// Describes one experiment cell directory: the fingerprint every run in it
// must carry, plus what the report needs to place the cell in a series.
struct CellInfo {
  std::string cell;
  std::string experiment_id;
  std::string config_hash;
  std::optional<double> rho;
  std::optional<std::size_t> classes;
  std::string note;
};

std::string cell_info_to_json(const CellInfo& c);
CellInfo cell_info_from_json(const std::string& text);

// Drops created_at so two results files can be compared byte for byte.
std::string strip_timestamps(const std::string& json_text);

}  // namespace smoe
