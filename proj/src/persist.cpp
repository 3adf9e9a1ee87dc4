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

#include "smoe/persist.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace smoe {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// JSON has no infinities; the t and d sentinels are spelled as strings.
ojson number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

const json& need(const json& j, const std::string& key, const std::string& path = "") {
  const std::string where = path.empty() ? key : path + "." + key;
  if (!j.is_object() || !j.contains(key)) throw SchemaError("results: missing required key '" + where + "'");
  return j.at(key);
}

double as_double(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw SchemaError("results: key '" + key + "' is not a number");
}

template <class T>
T typed(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw SchemaError("results: key '" + key + "' has the wrong type");
  }
}

void check_version(const json& j, const char* kind) {
  const json& v = need(j, "schema_version");
  if (!v.is_number_integer() || v.get<int>() != kResultsSchemaVersion) {
    throw SchemaError(std::string(kind) + ": schema_version mismatch (expected " +
                      std::to_string(kResultsSchemaVersion) + ", got " + v.dump() + ")");
  }
}

ojson side_json(const SideResult& s) {
  ojson j;
  j["final_acc"] = s.final_acc;
  j["peak_acc"] = s.peak_acc;
  ojson t;
  auto col = [&s](auto get) {
    ojson a = ojson::array();
    for (const auto& e : s.epochs) a.push_back(get(e));
    return a;
  };
  t["epoch"] = col([](const EpochRecord& e) { return e.epoch; });
  t["train_loss"] = col([](const EpochRecord& e) { return e.train_loss; });
  t["train_acc"] = col([](const EpochRecord& e) { return e.train_acc; });
  t["test_acc"] = col([](const EpochRecord& e) { return e.test_acc; });
  t["tau"] = col([](const EpochRecord& e) { return e.tau; });
  t["k"] = col([](const EpochRecord& e) { return e.k; });
  t["lb"] = col([](const EpochRecord& e) { return e.lb; });
  t["ent"] = col([](const EpochRecord& e) { return e.ent; });
  t["entropy"] = col([](const EpochRecord& e) { return e.entropy; });
  t["f"] = col([](const EpochRecord& e) { return e.f; });
  t["p"] = col([](const EpochRecord& e) { return e.p; });
  t["overflow"] = col([](const EpochRecord& e) { return e.overflow; });
  t["data_draws"] = col([](const EpochRecord& e) { return e.data_draws; });
  t["augment_draws"] = col([](const EpochRecord& e) { return e.augment_draws; });
  j["trajectories"] = t;
  return j;
}

SideResult side_from_json(const json& j, const std::string& path) {
  SideResult s;
  s.final_acc = as_double(need(j, "final_acc", path), path + ".final_acc");
  s.peak_acc = as_double(need(j, "peak_acc", path), path + ".peak_acc");
  const std::string tp = path + ".trajectories";
  const json& t = need(j, "trajectories", path);
  const json& epochs = need(t, "epoch", tp);
  const std::size_t n = epochs.size();
  s.epochs.resize(n);
  auto col = [&](const char* key, auto setter) {
    const json& a = need(t, key, tp);
    if (!a.is_array() || a.size() != n) {
      throw SchemaError("results: key '" + tp + "." + key + "' must have " + std::to_string(n) + " entries");
    }
    for (std::size_t i = 0; i < n; ++i) setter(s.epochs[i], a[i], tp + "." + key);
  };
  col("epoch", [](EpochRecord& e, const json& v, const std::string& k) { e.epoch = typed<std::size_t>(v, k); });
  col("train_loss", [](EpochRecord& e, const json& v, const std::string& k) { e.train_loss = as_double(v, k); });
  col("train_acc", [](EpochRecord& e, const json& v, const std::string& k) { e.train_acc = as_double(v, k); });
  col("test_acc", [](EpochRecord& e, const json& v, const std::string& k) { e.test_acc = as_double(v, k); });
  col("tau", [](EpochRecord& e, const json& v, const std::string& k) { e.tau = as_double(v, k); });
  col("k", [](EpochRecord& e, const json& v, const std::string& k) { e.k = typed<std::size_t>(v, k); });
  col("lb", [](EpochRecord& e, const json& v, const std::string& k) { e.lb = as_double(v, k); });
  col("ent", [](EpochRecord& e, const json& v, const std::string& k) { e.ent = as_double(v, k); });
  col("entropy", [](EpochRecord& e, const json& v, const std::string& k) { e.entropy = as_double(v, k); });
  col("f", [](EpochRecord& e, const json& v, const std::string& k) { e.f = typed<std::vector<double>>(v, k); });
  col("p", [](EpochRecord& e, const json& v, const std::string& k) { e.p = typed<std::vector<double>>(v, k); });
  col("overflow", [](EpochRecord& e, const json& v, const std::string& k) { e.overflow = typed<std::uint64_t>(v, k); });
  col("data_draws", [](EpochRecord& e, const json& v, const std::string& k) { e.data_draws = typed<std::uint64_t>(v, k); });
  col("augment_draws", [](EpochRecord& e, const json& v, const std::string& k) { e.augment_draws = typed<std::uint64_t>(v, k); });
  return s;
}

}  // namespace

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file_atomic(const std::string& path, const std::string& text) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string run_result_to_json(const RunResult& r) {
  ojson j;
  j["schema_version"] = kResultsSchemaVersion;
  j["experiment_id"] = r.experiment_id;
  j["seed"] = r.seed;
  j["dense_acc"] = r.dense_acc;
  j["moe_acc"] = r.moe_acc;
  j["gap"] = r.gap;
  j["config_hash"] = r.config_hash;
  j["aborted"] = r.aborted;
  j["abort_message"] = r.abort_message;
  j["created_at"] = r.created_at;
  j["expert_usage"] = r.expert_usage;
  j["heatmap"] = r.heatmap;
  j["trajectories"] = {{"dense", side_json(r.dense)}, {"moe", side_json(r.moe)}};
  return j.dump(2) + "\n";
}

RunResult run_result_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("results: invalid JSON: ") + e.what());
  }
  check_version(j, "results");
  RunResult r;
  r.experiment_id = typed<std::string>(need(j, "experiment_id"), "experiment_id");
  r.seed = typed<std::uint64_t>(need(j, "seed"), "seed");
  r.dense_acc = as_double(need(j, "dense_acc"), "dense_acc");
  r.moe_acc = as_double(need(j, "moe_acc"), "moe_acc");
  r.gap = as_double(need(j, "gap"), "gap");
  r.config_hash = typed<std::string>(need(j, "config_hash"), "config_hash");
  r.expert_usage = typed<std::vector<double>>(need(j, "expert_usage"), "expert_usage");
  r.heatmap = typed<CountMatrix>(need(j, "heatmap"), "heatmap");
  const json& t = need(j, "trajectories");
  r.dense = side_from_json(need(t, "dense", "trajectories"), "trajectories.dense");
  r.moe = side_from_json(need(t, "moe", "trajectories"), "trajectories.moe");
  if (j.contains("aborted")) r.aborted = typed<bool>(j.at("aborted"), "aborted");
  if (j.contains("abort_message")) r.abort_message = typed<std::string>(j.at("abort_message"), "abort_message");
  if (j.contains("created_at")) r.created_at = typed<std::string>(j.at("created_at"), "created_at");
  return r;
}

void persist(RunResult r, const std::string& path) {
  if (r.created_at.empty()) r.created_at = utc_timestamp();
  write_file_atomic(path, run_result_to_json(r));
}

RunResult load_run(const std::string& path) { return run_result_from_json(read_text_file(path)); }

std::string aggregate_to_json(const AggregateStats& s) {
  ojson j;
  j["schema_version"] = kResultsSchemaVersion;
  j["n"] = s.n;
  j["mean_gap"] = number(s.mean_gap);
  j["sd_gap"] = number(s.sd_gap);
  j["t"] = number(s.t_statistic);
  j["cohens_d"] = number(s.cohens_d);
  j["ci95_low"] = number(s.ci95_low);
  j["ci95_high"] = number(s.ci95_high);
  j["p_value"] = number(s.p_value);
  j["all_seeds_positive"] = s.all_seeds_positive;
  j["source_files"] = s.source_files;
  return j.dump(2) + "\n";
}

AggregateStats aggregate_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("aggregate: invalid JSON: ") + e.what());
  }
  check_version(j, "aggregate");
  AggregateStats s;
  s.n = typed<std::size_t>(need(j, "n"), "n");
  s.mean_gap = as_double(need(j, "mean_gap"), "mean_gap");
  s.sd_gap = as_double(need(j, "sd_gap"), "sd_gap");
  s.t_statistic = as_double(need(j, "t"), "t");
  s.cohens_d = as_double(need(j, "cohens_d"), "cohens_d");
  s.ci95_low = as_double(need(j, "ci95_low"), "ci95_low");
  s.ci95_high = as_double(need(j, "ci95_high"), "ci95_high");
  s.source_files = typed<std::vector<std::string>>(need(j, "source_files"), "source_files");
  if (j.contains("p_value")) s.p_value = as_double(j.at("p_value"), "p_value");
  if (j.contains("all_seeds_positive")) s.all_seeds_positive = typed<bool>(j.at("all_seeds_positive"), "all_seeds_positive");
  return s;
}

void persist(const AggregateStats& s, const std::string& path) {
  write_file_atomic(path, aggregate_to_json(s));
}

AggregateStats load_aggregate(const std::string& path) {
  return aggregate_from_json(read_text_file(path));
}

AggregateStats aggregate(const std::vector<RunResult>& runs) {
  std::vector<double> gaps;
  for (const auto& r : runs) gaps.push_back(r.gap);
  return aggregate_gaps(gaps);
}

std::string search_history_to_json(const SearchResult& r, const SearchSpace& space) {
  auto ind_json = [&space](const Individual& ind) {
    ojson j;
    j["generation"] = ind.generation;
    j["index"] = ind.index;
    ojson g;
    for (std::size_t i = 0; i < space.active_genes(); ++i) {
      const Gene gene = static_cast<Gene>(i);
      g[to_string(gene)] = ind.genes[gene];
    }
    j["genes"] = g;
    j["fitness"] = ind.fitness ? number(*ind.fitness) : ojson(nullptr);
    if (ind.record) {
      j["accuracy"] = ind.record->accuracy;
      j["flops_reduction"] = ind.record->flops_reduction;
      j["gap"] = ind.record->gap;
    }
    if (!ind.error.empty()) j["error"] = ind.error;
    return j;
  };
  ojson j;
  j["schema_version"] = kResultsSchemaVersion;
  j["budget"] = r.history.size();
  j["best"] = ind_json(r.best);
  j["best_by_generation"] = ojson::array();
  for (double b : r.best_by_generation) j["best_by_generation"].push_back(number(b));
  j["history"] = ojson::array();
  for (const auto& ind : r.history) j["history"].push_back(ind_json(ind));
  return j.dump(2) + "\n";
}

std::string flops_report_to_json(const FlopsReport& r) {
  ojson j;
  j["schema_version"] = kResultsSchemaVersion;
  j["total"] = r.total;
  j["routed"] = r.routed;
  j["rho"] = r.rho;
  j["head_fraction"] = r.head_fraction;
  j["conv_fraction"] = r.conv_fraction;
  j["per_component"] = ojson::array();
  for (const auto& c : r.per_component) {
    const char* role = c.role == ComponentRole::backbone ? "backbone"
                       : c.role == ComponentRole::head   ? "head"
                                                         : "router";
    j["per_component"].push_back({{"name", c.name}, {"flops", c.flops}, {"role", role}, {"routed", c.routed}});
  }
  return j.dump(2) + "\n";
}

std::string cell_info_to_json(const CellInfo& c) {
  ojson j;
  j["schema_version"] = kResultsSchemaVersion;
  j["cell"] = c.cell;
  j["experiment_id"] = c.experiment_id;
  j["config_hash"] = c.config_hash;
  j["rho"] = c.rho ? ojson(*c.rho) : ojson(nullptr);
  j["classes"] = c.classes ? ojson(*c.classes) : ojson(nullptr);
  j["note"] = c.note;
  return j.dump(2) + "\n";
}

CellInfo cell_info_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("cell: invalid JSON: ") + e.what());
  }
  check_version(j, "cell");
  CellInfo c;
  c.cell = typed<std::string>(need(j, "cell"), "cell");
  c.experiment_id = typed<std::string>(need(j, "experiment_id"), "experiment_id");
  c.config_hash = typed<std::string>(need(j, "config_hash"), "config_hash");
  if (const json& r = need(j, "rho"); !r.is_null()) c.rho = as_double(r, "rho");
  if (const json& n = need(j, "classes"); !n.is_null()) c.classes = typed<std::size_t>(n, "classes");
  if (j.contains("note")) c.note = typed<std::string>(j.at("note"), "note");
  return c;
}

std::string strip_timestamps(const std::string& json_text) {
  json j = json::parse(json_text);
  if (j.is_object()) j.erase("created_at");
  return j.dump();
}

}  // namespace smoe
