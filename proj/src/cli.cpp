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


#include "smoe/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <regex>
#include <thread>

#include "CLI11.hpp"
#include "smoe/data.hpp"
#include "smoe/evosearch.hpp"
#include "smoe/flops.hpp"
#include "smoe/rng.hpp"

namespace smoe {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

std::string percent(double fraction) { return fmt("%.4f%%", fraction * 100.0); }

std::vector<BlockSpec> blocks(std::initializer_list<std::size_t> channels, bool bn = false) {
  std::vector<BlockSpec> out;
  for (std::size_t c : channels) out.push_back({c, bn, true});
  return out;
}

BackboneSpec standard_cifar_backbone() {
  BackboneSpec b;
  b.family = BackboneFamily::standard;
  b.blocks = blocks({24, 48});
  b.width = 1.0;
  return b;
}

struct PresetEntry {
  const char* name;
  const char* description;
  ConfigDocument (*make)();
};

ConfigDocument make_cifar10_dev() {
  ConfigDocument d;
  d.experiment.experiment_id = "cifar10-dev";
  d.experiment.model.backbone.width = 0.72;
  return d;
}

ConfigDocument make_rho_sweep() {
  ConfigDocument d;
  ExperimentConfig& c = d.experiment;
  c.experiment_id = "rho-sweep";
  c.model.dense.kind = DenseHeadKind::mlp_1024_h;
  c.model.dense.hidden = 512;
  c.model.moe.hidden = 512;
  c.temperature.kind = ScheduleKind::linear;
  return d;
}

ConfigDocument make_k_ablation() {
  ConfigDocument d;
  ExperimentConfig& c = d.experiment;
  c.experiment_id = "k-ablation";
  c.model.backbone = standard_cifar_backbone();
  c.model.backbone.moe_conv_positions = {1};
  c.model.backbone.moe_experts = 8;
  c.model.backbone.moe_k = 2;
  c.model.backbone.moe_init = BankInit::perturbed;
  c.model.backbone.moe_noise = 0.10;
  c.model.use_moe = false;
  c.warmup_enabled = false;
  return d;
}

ConfigDocument make_synthetic_collapse() {
  ConfigDocument d;
  ExperimentConfig& c = d.experiment;
  c.experiment_id = "synthetic-collapse";
  c.dataset.kind = DatasetKind::synthetic_clusters;
  c.dataset.synthetic = SyntheticParams{};
  c.model.backbone.family = BackboneFamily::identity;
  c.model.backbone.blocks.clear();
  c.model.dense.kind = DenseHeadKind::mlp_1024_h;
  c.model.dense.hidden = c.model.moe.hidden;
  c.epochs = 20;
  c.seeds = {42, 123, 456};
  return d;
}

ConfigDocument make_resnet18_flops() {
  ConfigDocument d;
  ExperimentConfig& c = d.experiment;
  c.experiment_id = "resnet18-flops";
  c.model.backbone.family = BackboneFamily::external;
  c.model.backbone.blocks.clear();
  c.model.backbone.external_flops = 1800000000ull;
  c.model.backbone.external_features = 512;
  c.model.backbone.in_h = c.model.backbone.in_w = 224;
  c.model.use_moe = false;
  c.model.dense.kind = DenseHeadKind::plain_fc;
  c.metric = EvalMetric::peak_validation;
  d.flops.head_routed = true;
  d.flops.classes = 1000;
  return d;
}

const std::vector<PresetEntry>& presets() {
  static const std::vector<PresetEntry> table{
      {"cifar10-dev", "CIFAR-10 depthwise backbone (w=0.72) with the tuned sparse MoE head",
       make_cifar10_dev},
      {"rho-sweep", "base for `sweep --axis rho`: 1024->h dense head against h-wide experts",
       make_rho_sweep},
      {"k-ablation", "base for `sweep --axis k`: expert conv bank in block 2 of the standard backbone",
       make_k_ablation},
      {"synthetic-collapse", "8-cluster synthetic task for routing-collapse studies",
       make_synthetic_collapse},
      {"resnet18-flops", "cost-only: 1.8 GFLOP external backbone with a 512->1000 head",
       make_resnet18_flops},
  };
  return table;
}

ConfigDocument load_source(const std::string& config, const std::string& preset_name) {
  if (!config.empty() && !preset_name.empty()) {
    throw ConfigError("<command line>", "--config and --preset are mutually exclusive");
  }
  if (!config.empty()) return load_config(config);
  if (!preset_name.empty()) return preset(preset_name);
  throw ConfigError("<command line>", "one of --config or --preset is required");
}

// One prepared experiment cell: configuration, dataset and output location.
struct CellPlan {
  std::string name;
  fs::path dir;
  ConfigDocument doc;
  std::shared_ptr<const Dataset> data;
  CellInfo info;
  std::vector<std::string> files;
  std::vector<double> gaps;
};

std::string dataset_key(const DatasetHandle& h) {
  const SyntheticParams& s = h.synthetic;
  return fmt("%s|%s|%zu|%zu|%zu,%zu,%zu,%.17g,%.17g,%zu,%zu,%llu", to_string(h.kind), h.root.c_str(),
             h.train_limit, h.test_limit, s.clusters, s.classes, s.dim, s.noise_std, s.centroid_std,
             s.train_per_class, s.test_per_class, static_cast<unsigned long long>(s.seed));
}

// Loads data once per distinct handle and validates that both sides of the
// pair can be built, so configuration problems surface before any training.
void prepare_cells(std::vector<CellPlan>& cells) {
  std::map<std::string, std::shared_ptr<const Dataset>> cache;
  for (CellPlan& c : cells) {
    const ExperimentConfig& cfg = c.doc.experiment;
    const std::string key = dataset_key(cfg.dataset);
    if (!cache.count(key)) cache[key] = std::make_shared<const Dataset>(load_dataset(cfg.dataset));
    c.data = cache[key];
    ModelSpec moe, dense;
    try {
      moe = resolve_model_spec(cfg, *c.data, true);
      dense = resolve_model_spec(cfg, *c.data, false);
      Classifier probe_moe(moe, RngStream(0)), probe_dense(dense, RngStream(0));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(c.name.empty() ? "backbone" : c.name, e.what());
    }
    c.info.cell = c.name.empty() ? cfg.experiment_id : c.name;
    c.info.experiment_id = cfg.experiment_id;
    c.info.config_hash = config_hash(cfg);
    c.info.classes = c.data->classes;
    FlopsOptions o = flops_options(c.doc);
    c.info.rho = flops_model(moe, o).rho;
  }
}

// Runs every (cell, seed) pair and writes one results file per run plus a
// per-cell aggregate. Returns the exit code.
int execute_cells(std::vector<CellPlan>& cells, std::size_t jobs, std::ostream& out,
                  std::ostream& err) {
  prepare_cells(cells);
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> list;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    CellPlan& c = cells[i];
    fs::create_directories(c.dir);
    write_file_atomic((c.dir / "config.json").string(), config_to_json(c.doc));
    write_file_atomic((c.dir / "cell.json").string(), cell_info_to_json(c.info));
    for (std::uint64_t s : c.doc.experiment.seeds) list.push_back({i, s});
  }

  std::mutex mu;
  std::vector<std::map<std::uint64_t, double>> gaps(cells.size());
  bool aborted = false;
  run_jobs(list.size(), jobs, [&](std::size_t j) {
    const Job job = list[j];
    const CellPlan& c = cells[job.cell];
    const std::string file = (c.dir / ("seed_" + std::to_string(job.seed) + ".json")).string();
    try {
      RunResult r = run_pair(c.doc.experiment, job.seed, *c.data);
      persist(r, file);
      std::lock_guard<std::mutex> lock(mu);
      gaps[job.cell][job.seed] = r.gap;
      out << fmt("%s seed %llu: dense %.2f moe %.2f gap %+.2f\n", c.info.cell.c_str(),
                 static_cast<unsigned long long>(job.seed), r.dense_acc, r.moe_acc, r.gap);
    } catch (const RunAbort& e) {
      persist(e.partial(), (c.dir / ("seed_" + std::to_string(job.seed) + ".aborted.json")).string());
      std::lock_guard<std::mutex> lock(mu);
      aborted = true;
      err << c.info.cell << " seed " << job.seed << ": aborted: " << e.what() << "\n";
    }
  });

  for (std::size_t i = 0; i < cells.size(); ++i) {
    CellPlan& c = cells[i];
    std::vector<double> g;
    std::vector<std::string> files;
    for (const auto& [seed, gap] : gaps[i]) {
      g.push_back(gap);
      files.push_back((c.dir / ("seed_" + std::to_string(seed) + ".json")).string());
    }
    if (g.size() < 2) continue;
    AggregateStats s = aggregate_gaps(g);
    s.source_files = files;
    persist(s, (c.dir / "aggregate.json").string());
    out << fmt("%s: n=%zu mean gap %+.3f sd %.3f t %.3f p %.3g\n", c.info.cell.c_str(), s.n,
               s.mean_gap, s.sd_gap, s.t_statistic, s.p_value);
  }
  return aborted ? kExitAbort : kExitOk;
}

std::string schedule_name(const TemperatureSchedule& t) {
  return fmt("%s_%.2f", t.kind == ScheduleKind::sigmoid ? "sigmoid" : "linear", t.tau_min);
}

bool has_head_routing(const ExperimentConfig& c) { return c.model.use_moe; }
bool has_bank_routing(const ExperimentConfig& c) { return !c.model.backbone.moe_conv_positions.empty(); }

void require_axis(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("--axis", msg);
}

const char* role_name(ComponentRole r) {
  switch (r) {
    case ComponentRole::backbone: return "backbone";
    case ComponentRole::head: return "head";
    case ComponentRole::router: return "router";
  }
  return "?";
}

// Quadratic stand-in for training: peaks at the tuned CIFAR-10 values.
Evaluator dry_evaluator(const SearchSpace& space) {
  static constexpr double target[kGeneCount] = {0.717, 1.064, 0.019, 0.024, 0.087};
  return [space](const Genes& g) {
    double f = 0.0;
    for (std::size_t i = 0; i < space.active_genes(); ++i) {
      const Gene gene = static_cast<Gene>(i);
      const ParamRange& r = space.range(gene);
      const double z = (g[gene] - target[static_cast<std::size_t>(gene)]) / (r.upper - r.lower);
      f -= z * z;
    }
    return Evaluation{f, std::nullopt};
  };
}

ExperimentConfig apply_genes(ExperimentConfig c, const Genes& g, const SearchSpace& space) {
  c.model.backbone.width = g[Gene::w];
  c.model.moe.capacity_factor = g[Gene::c];
  c.model.moe.lambda_lb = g[Gene::lambda_lb];
  c.model.moe.lambda_ent = g[Gene::lambda_ent];
  if (space.utility) {
    c.model.moe.utility_bias = true;
    c.model.moe.utility_weight = g[Gene::lambda_u];
  }
  return c;
}

// Trains each candidate for the search epoch budget. r is the cost saving
// against the dense model of the same backbone at width 1.
Evaluator training_evaluator(const ConfigDocument& doc, std::shared_ptr<const Dataset> data,
                             std::ostream& out) {
  const SearchSettings ss = doc.search;
  const FlopsOptions opts = flops_options(doc);
  ExperimentConfig base = doc.experiment;
  base.epochs = ss.epochs;
  ExperimentConfig ref_cfg = base;
  ref_cfg.model.backbone.width = 1.0;
  const double ref = static_cast<double>(flops_model(resolve_model_spec(ref_cfg, *data, false)).total);
  return fitness_evaluator(
      [=, &out](const Genes& g) {
        ExperimentConfig c = apply_genes(base, g, ss.space);
        const double cost =
            static_cast<double>(flops_model(resolve_model_spec(c, *data, true), opts).total);
        RunResult r = run_pair(c, ss.seed, *data);
        EvalRecord rec{r.moe_acc / 100.0, 1.0 - cost / ref, r.gap / 100.0};
        out << fmt("  w=%.4f c=%.4f lb=%.4f ent=%.4f -> acc %.4f r %.4f gap %+.4f\n", g[Gene::w],
                   g[Gene::c], g[Gene::lambda_lb], g[Gene::lambda_ent], rec.accuracy,
                   rec.flops_reduction, rec.gap);
        return rec;
      },
      ss.fitness);
}

void write_heatmap(const CountMatrix& m, const fs::path& stem) {
  std::string csv = "class";
  const std::size_t experts = m.empty() ? 0 : m[0].size();
  for (std::size_t e = 0; e < experts; ++e) csv += ",expert" + std::to_string(e);
  csv += "\n";
  for (std::size_t c = 0; c < m.size(); ++c) {
    csv += std::to_string(c);
    for (auto v : m[c]) csv += "," + std::to_string(v);
    csv += "\n";
  }
  write_file_atomic(stem.string() + ".csv", csv);

  // Row-normalized grayscale, 8x8 pixels per cell.
  constexpr std::size_t px = 8;
  std::string pgm = fmt("P2\n%zu %zu\n255\n", experts * px, m.size() * px);
  for (const auto& row : m) {
    std::uint64_t total = 0;
    for (auto v : row) total += v;
    std::string line;
    for (std::size_t e = 0; e < experts; ++e) {
      const int shade = total ? static_cast<int>(std::lround(255.0 * row[e] / total)) : 0;
      for (std::size_t i = 0; i < px; ++i) line += std::to_string(shade) + " ";
    }
    line += "\n";
    for (std::size_t i = 0; i < px; ++i) pgm += line;
  }
  write_file_atomic(stem.string() + ".pgm", pgm);
}

void write_trajectory(const RunResult& r, const fs::path& path) {
  std::string csv = "epoch,dense_test_acc,moe_test_acc,moe_train_loss,tau,k,min_f,max_f\n";
  const std::size_t n = std::min(r.dense.epochs.size(), r.moe.epochs.size());
  for (std::size_t e = 0; e < n; ++e) {
    const EpochRecord& m = r.moe.epochs[e];
    double lo = 0.0, hi = 0.0;
    if (!m.f.empty()) {
      lo = *std::min_element(m.f.begin(), m.f.end());
      hi = *std::max_element(m.f.begin(), m.f.end());
    }
    csv += fmt("%zu,%.4f,%.4f,%.6f,%.6f,%zu,%.6f,%.6f\n", m.epoch, r.dense.epochs[e].test_acc,
               m.test_acc, m.train_loss, m.tau, m.k, lo, hi);
  }
  write_file_atomic(path.string(), csv);
}

std::string stat_cell(const CellReport& c, double AggregateStats::*field, const char* f) {
  return c.has_stats ? fmt(f, c.stats.*field) : std::string();
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.push_back(p.name);
  return out;
}

std::string preset_description(const std::string& name) {
  for (const auto& p : presets())
    if (name == p.name) return p.description;
  throw ConfigError("--preset", "unknown preset '" + name + "'");
}

ConfigDocument preset(const std::string& name) {
  for (const auto& p : presets())
    if (name == p.name) return p.make();
  throw ConfigError("--preset", "unknown preset '" + name + "'");
}

ModelSpec declared_model_spec(const ConfigDocument& doc) {
  const ExperimentConfig& c = doc.experiment;
  ModelSpec s = c.model;
  BackboneSpec& b = s.backbone;
  switch (c.dataset.kind) {
    case DatasetKind::cifar10_binary:
    case DatasetKind::cifar100_binary:
      s.classes = c.dataset.kind == DatasetKind::cifar10_binary ? 10 : 100;
      if (b.family != BackboneFamily::external) b.in_channels = 3, b.in_h = 32, b.in_w = 32;
      break;
    case DatasetKind::synthetic_clusters:
      s.classes = c.dataset.synthetic.classes;
      if (b.family != BackboneFamily::external) b.in_channels = c.dataset.synthetic.dim, b.in_h = 1, b.in_w = 1;
      break;
  }
  if (doc.flops.classes) s.classes = *doc.flops.classes;
  return s;
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "rho") return SweepAxis::rho;
  if (s == "k") return SweepAxis::k;
  if (s == "capacity") return SweepAxis::capacity;
  if (s == "schedule") return SweepAxis::schedule;
  throw ConfigError("--axis", "expected one of rho, k, capacity, schedule");
}

std::vector<SweepCell> expand_sweep(const ExperimentConfig& base, SweepAxis axis) {
  std::vector<SweepCell> cells;
  switch (axis) {
    case SweepAxis::rho: {
      require_axis(base.dataset.kind != DatasetKind::synthetic_clusters,
                   "the rho axis varies conv backbones and needs an image dataset");
      require_axis(has_head_routing(base), "the rho axis needs a routed head (head.use_moe)");
      BackboneSpec dw = base.model.backbone;
      if (dw.family != BackboneFamily::depthwise) dw = default_experiment_config().model.backbone;
      dw.moe_conv_positions.clear();
      for (const char* family : {"standard", "depthwise"}) {
        for (std::size_t h : {128, 512, 2048}) {
          ExperimentConfig c = base;
          c.model.backbone = std::string(family) == "standard" ? standard_cifar_backbone() : dw;
          c.model.dense.kind = DenseHeadKind::mlp_1024_h;
          c.model.dense.hidden = h;
          c.model.moe.hidden = h;
          cells.push_back({fmt("cell_%s_%zu", family, h), c});
        }
      }
      break;
    }
    case SweepAxis::k: {
      require_axis(has_head_routing(base) || has_bank_routing(base),
                   "the k axis needs a routed head or expert conv banks");
      require_axis(!has_head_routing(base) || base.model.moe.dispatch == DispatchKind::hard_topk,
                   "the k axis needs hard top-k dispatch");
      for (std::size_t k : {1, 2}) {
        ExperimentConfig c = base;
        if (has_head_routing(c)) c.k = k;
        if (has_bank_routing(c)) c.model.backbone.moe_k = k;
        cells.push_back({fmt("cell_k%zu", k), c});
      }
      break;
    }
    case SweepAxis::capacity: {
      require_axis(has_head_routing(base) && base.model.moe.dispatch == DispatchKind::hard_topk,
                   "the capacity axis needs a hard top-k routed head");
      ExperimentConfig none = base;
      none.model.moe.enforce_capacity = false;
      cells.push_back({"cell_cap_none", none});
      for (double cf : {1.0, 1.064, 1.5}) {
        ExperimentConfig c = base;
        c.model.moe.enforce_capacity = true;
        c.model.moe.capacity_factor = cf;
        cells.push_back({fmt("cell_cap_%.3f", cf), c});
      }
      break;
    }
    case SweepAxis::schedule: {
      require_axis(has_head_routing(base), "the schedule axis needs a routed head");
      const std::pair<ScheduleKind, double> variants[] = {
          {ScheduleKind::sigmoid, 0.13}, {ScheduleKind::linear, 0.13}, {ScheduleKind::linear, 0.30}};
      for (const auto& [kind, tau_min] : variants) {
        ExperimentConfig c = base;
        c.temperature.kind = kind;
        c.temperature.tau_min = tau_min;
        cells.push_back({"cell_sched_" + schedule_name(c.temperature), c});
      }
      break;
    }
  }
  return cells;
}

void run_jobs(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& job) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  // Split the OpenMP threads between workers instead of oversubscribing.
  const int per_worker = std::max(1, omp_get_max_threads() / static_cast<int>(jobs));
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      omp_set_num_threads(per_worker);
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

Report build_report(const std::string& in_dir, const std::string& out_dir) {
  if (!fs::is_directory(in_dir)) throw ReportError("report: '" + in_dir + "' is not a directory");
  static const std::regex seed_file(R"(seed_(\d+)\.json)");
  std::map<std::string, std::vector<fs::path>> by_dir;
  for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, seed_file)) by_dir[entry.path().parent_path().string()].push_back(entry.path());
  }
  if (by_dir.empty()) throw ReportError("report: no seed_<n>.json results under '" + in_dir + "'");

  Report report;
  for (auto& [dir, files] : by_dir) {
    std::sort(files.begin(), files.end());
    CellReport cell;
    cell.path = fs::relative(dir, in_dir).string();
    if (cell.path == ".") cell.path = fs::path(dir).filename().string();
    for (const fs::path& f : files) {
      cell.files.push_back(f.string());
      cell.runs.push_back(load_run(f.string()));
    }
    const fs::path info = fs::path(dir) / "cell.json";
    if (fs::exists(info)) {
      cell.info = cell_info_from_json(read_text_file(info.string()));
    } else {
      cell.info.cell = fs::path(dir).filename().string();
      cell.info.experiment_id = cell.runs.front().experiment_id;
      cell.info.config_hash = cell.runs.front().config_hash;
    }
    for (std::size_t i = 0; i < cell.runs.size(); ++i) {
      if (cell.runs[i].config_hash != cell.info.config_hash) {
        throw ReportError("report: fingerprint mismatch in '" + cell.path + "': " + cell.files[i] +
                          " has " + cell.runs[i].config_hash + ", cell has " + cell.info.config_hash);
      }
    }
    if (cell.runs.size() >= 2) {
      cell.stats = aggregate(cell.runs);
      cell.stats.source_files = cell.files;
      cell.has_stats = true;
    }
    report.cells.push_back(std::move(cell));
  }
  std::stable_sort(report.cells.begin(), report.cells.end(), [](const CellReport& a, const CellReport& b) {
    if (a.info.rho.has_value() != b.info.rho.has_value()) return a.info.rho.has_value();
    if (a.info.rho && *a.info.rho != *b.info.rho) return *a.info.rho < *b.info.rho;
    return a.path < b.path;
  });

  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (const CellReport& c : report.cells)
    if (c.info.rho && c.has_stats) series[c.info.experiment_id].push_back({*c.info.rho, c.stats.mean_gap});
  for (const auto& [id, pts] : series) {
    if (pts.front().first == pts.back().first) continue;
    report.gap_monotone_in_rho[id] = std::is_sorted(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
      return a.second < b.second;
    });
  }

  if (out_dir.empty()) return report;
  const fs::path out(out_dir);
  std::string summary = "cell,experiment_id,rho,classes,n,mean_gap,sd_gap,t,p,ci95_low,ci95_high,all_positive\n";
  std::string by_rho = "experiment_id,rho,cell,n,mean_gap,sd_gap,ci95_low,ci95_high\n";
  std::string by_classes = "experiment_id,classes,cell,n,mean_gap,sd_gap,ci95_low,ci95_high\n";
  for (const CellReport& c : report.cells) {
    const fs::path dir = fs::equivalent(in_dir, fs::path(c.files.front()).parent_path())
                             ? out
                             : out / c.path;
    if (c.has_stats) persist(c.stats, (dir / "aggregate.json").string());
    for (std::size_t i = 0; i < c.runs.size(); ++i) {
      const RunResult& r = c.runs[i];
      const std::string seed = std::to_string(r.seed);
      if (!r.heatmap.empty()) write_heatmap(r.heatmap, dir / ("heatmap_seed_" + seed));
      if (!r.moe.epochs.empty()) write_trajectory(r, dir / ("trajectory_seed_" + seed + ".csv"));
    }
    const std::string rho = c.info.rho ? fmt("%.6f", *c.info.rho) : "";
    const std::string classes = c.info.classes ? std::to_string(*c.info.classes) : "";
    const std::string n = std::to_string(c.runs.size());
    const std::string mean = stat_cell(c, &AggregateStats::mean_gap, "%.4f");
    const std::string sd = stat_cell(c, &AggregateStats::sd_gap, "%.4f");
    const std::string lo = stat_cell(c, &AggregateStats::ci95_low, "%.4f");
    const std::string hi = stat_cell(c, &AggregateStats::ci95_high, "%.4f");
    summary += c.path + "," + c.info.experiment_id + "," + rho + "," + classes + "," + n + "," + mean +
               "," + sd + "," + stat_cell(c, &AggregateStats::t_statistic, "%.4f") + "," +
               stat_cell(c, &AggregateStats::p_value, "%.6g") + "," + lo + "," + hi + "," +
               (c.has_stats ? (c.stats.all_seeds_positive ? "true" : "false") : "") + "\n";
    if (c.has_stats && c.info.rho) by_rho += c.info.experiment_id + "," + rho + "," + c.path + "," + n + "," + mean + "," + sd + "," + lo + "," + hi + "\n";
    if (c.has_stats && c.info.classes)
      by_classes += c.info.experiment_id + "," + classes + "," + c.path + "," + n + "," + mean + "," + sd + "," + lo + "," + hi + "\n";
  }
  write_file_atomic((out / "summary.csv").string(), summary);
  write_file_atomic((out / "gap_vs_rho.csv").string(), by_rho);
  write_file_atomic((out / "gap_vs_classes.csv").string(), by_classes);
  return report;
}

namespace {

struct Source {
  std::string config, preset;
};

void add_source(CLI::App* cmd, Source& src) {
  cmd->add_option("--config", src.config, "Config document (JSON)");
  cmd->add_option("--preset", src.preset, "Built-in preset name");
}

std::size_t effective_jobs(std::size_t jobs) {
  return jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : jobs;
}

int cmd_train(const Source& src, std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs,
              std::string out_dir, std::size_t jobs, std::ostream& out, std::ostream& err) {
  ConfigDocument doc = load_source(src.config, src.preset);
  ExperimentConfig& cfg = doc.experiment;
  if (seed) cfg.seeds = {*seed};
  if (epochs) cfg.epochs = *epochs;
  if (out_dir.empty()) out_dir = (fs::path(cfg.output_dir) / cfg.experiment_id).string();
  std::vector<CellPlan> cells(1);
  cells[0].dir = out_dir;
  cells[0].doc = doc;
  return execute_cells(cells, jobs, out, err);
}

int cmd_sweep(const Source& src, const std::string& axis_name, std::vector<std::uint64_t> seeds,
              std::optional<std::size_t> epochs, std::string out_dir, std::size_t jobs,
              std::ostream& out, std::ostream& err) {
  ConfigDocument doc = load_source(src.config, src.preset);
  const SweepAxis axis = sweep_axis_from_string(axis_name);
  if (!seeds.empty()) doc.experiment.seeds = seeds;
  if (epochs) doc.experiment.epochs = *epochs;
  if (out_dir.empty()) {
    out_dir = (fs::path(doc.experiment.output_dir) / (doc.experiment.experiment_id + "-" + axis_name)).string();
  }
  std::vector<CellPlan> cells;
  for (SweepCell& s : expand_sweep(doc.experiment, axis)) {
    CellPlan c;
    c.name = s.name;
    c.dir = fs::path(out_dir) / s.name;
    c.doc = doc;
    c.doc.experiment = s.config;
    cells.push_back(std::move(c));
  }
  return execute_cells(cells, jobs, out, err);
}

int cmd_search(const Source& src, std::optional<std::size_t> budget, bool dry,
               std::optional<std::size_t> epochs, std::string out_dir, std::ostream& out) {
  ConfigDocument doc = load_source(src.config, src.preset);
  SearchSettings& ss = doc.search;
  if (budget) ss.ga.budget = *budget;
  if (epochs) ss.epochs = *epochs;
  if (ss.ga.budget < ss.ga.population) {
    throw ConfigError("--budget", fmt("must be >= population (%zu)", ss.ga.population));
  }
  ss.space.validate();
  if (out_dir.empty()) out_dir = (fs::path(doc.experiment.output_dir) / (doc.experiment.experiment_id + "-search")).string();

  Evaluator eval;
  if (dry) {
    eval = dry_evaluator(ss.space);
  } else {
    auto data = std::make_shared<const Dataset>(load_dataset(doc.experiment.dataset));
    try {
      Classifier probe(resolve_model_spec(doc.experiment, *data, true), RngStream(0));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("backbone", e.what());
    }
    eval = training_evaluator(doc, data, out);
  }
  SearchResult r = run_search(ss.space, eval, RngStream(ss.seed), ss.ga);
  fs::create_directories(out_dir);
  write_file_atomic((fs::path(out_dir) / "search_history.json").string(), search_history_to_json(r, ss.space));
  ConfigDocument best = doc;
  best.experiment = apply_genes(doc.experiment, r.best.genes, ss.space);
  write_file_atomic((fs::path(out_dir) / "best_config.json").string(), config_to_json(best));

  out << fmt("evaluations: %zu\n", r.history.size());
  for (std::size_t g = 0; g < r.best_by_generation.size(); ++g)
    out << fmt("generation %zu best fitness %.6f\n", g, r.best_by_generation[g]);
  out << "best:";
  for (std::size_t i = 0; i < ss.space.active_genes(); ++i) {
    const Gene gene = static_cast<Gene>(i);
    out << fmt(" %s=%.4f", to_string(gene), r.best.genes[gene]);
  }
  out << fmt(" fitness=%.6f\n", r.best.fitness.value_or(-INFINITY));
  return kExitOk;
}

int cmd_flops(const Source& src, const std::string& json_path, std::ostream& out) {
  ConfigDocument doc = load_source(src.config, src.preset);
  FlopsReport r;
  try {
    r = flops_model(declared_model_spec(doc), flops_options(doc));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("backbone", e.what());
  }
  out << fmt("%-28s %16s  %-8s %s\n", "component", "flops", "role", "routed");
  for (const FlopsComponent& c : r.per_component) {
    out << fmt("%-28s %16llu  %-8s %s\n", c.name.c_str(), static_cast<unsigned long long>(c.flops),
               role_name(c.role), c.routed ? "yes" : "no");
  }
  out << fmt("%-28s %16llu\n", "total", static_cast<unsigned long long>(r.total));
  out << fmt("%-28s %16llu\n", "routed", static_cast<unsigned long long>(r.routed));
  out << "rho " << percent(r.rho) << "  head " << percent(r.head_fraction) << "  backbone "
      << percent(r.conv_fraction) << "\n";
  if (!json_path.empty()) write_file_atomic(json_path, flops_report_to_json(r));
  return kExitOk;
}

int cmd_report(const std::string& in_dir, std::string out_dir, std::ostream& out) {
  if (out_dir.empty()) out_dir = in_dir;
  Report rep = build_report(in_dir, out_dir);
  out << fmt("%-36s %9s %3s %9s %8s %9s %10s\n", "cell", "rho", "n", "mean_gap", "sd", "t", "p");
  for (const CellReport& c : rep.cells) {
    const std::string rho = c.info.rho ? percent(*c.info.rho) : "-";
    if (c.has_stats) {
      out << fmt("%-36s %9s %3zu %+9.3f %8.3f %+9.3f %10.3g\n", c.path.c_str(), rho.c_str(), c.runs.size(),
                 c.stats.mean_gap, c.stats.sd_gap, c.stats.t_statistic, c.stats.p_value);
    } else {
      out << fmt("%-36s %9s %3zu %+9.3f\n", c.path.c_str(), rho.c_str(), c.runs.size(), c.runs[0].gap);
    }
  }
  for (const auto& [id, mono] : rep.gap_monotone_in_rho)
    out << id << ": gap monotone in rho: " << (mono ? "yes" : "no") << "\n";
  out << "wrote " << (fs::path(out_dir) / "summary.csv").string() << "\n";
  return kExitOk;
}

int cmd_preset(const std::string& name, bool list, const std::string& out_path, std::ostream& out) {
  if (list || name.empty()) {
    for (const auto& n : preset_names()) out << fmt("%-20s %s\n", n.c_str(), preset_description(n).c_str());
    return kExitOk;
  }
  const std::string text = config_to_json(preset(name));
  if (out_path.empty()) {
    out << text;
  } else {
    write_file_atomic(out_path, text);
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse mixture-of-experts experiments on small vision and synthetic tasks", "smoe"};
  app.require_subcommand(1);

  Source src;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> epochs, budget;
  std::string out_dir, axis, in_dir, json_path, preset_name;
  std::size_t jobs = 1;
  bool dry = false, list = false;

  CLI::App* train = app.add_subcommand("train", "Train dense and MoE models for each seed");
  add_source(train, src);
  train->add_option("--seed", seed, "Run this seed only");
  train->add_option("--epochs", epochs, "Override run.epochs");
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--jobs", jobs, "Concurrent runs (0 = hardware threads)");

  CLI::App* sweep = app.add_subcommand("sweep", "Run every cell of an experiment axis");
  add_source(sweep, src);
  sweep->add_option("--axis", axis, "rho, k, capacity or schedule")->required();
  sweep->add_option("--seeds", seeds, "Override run.seeds")->delimiter(',');
  sweep->add_option("--epochs", epochs, "Override run.epochs");
  sweep->add_option("--out", out_dir, "Output directory");
  sweep->add_option("--jobs", jobs, "Concurrent runs (0 = hardware threads)");

  CLI::App* search = app.add_subcommand("search", "Evolutionary search over width, capacity and loss weights");
  add_source(search, src);
  search->add_option("--budget", budget, "Total evaluations");
  search->add_option("--epochs", epochs, "Training epochs per candidate");
  search->add_flag("--dry-fitness", dry, "Score candidates with a quadratic instead of training");
  search->add_option("--out", out_dir, "Output directory");

  CLI::App* flops = app.add_subcommand("flops", "Analytic FLOPs breakdown and routed share");
  add_source(flops, src);
  flops->add_option("--json", json_path, "Also write the report as JSON");

  CLI::App* report = app.add_subcommand("report", "Aggregate results directories");
  report->add_option("--in", in_dir, "Results directory")->required();
  report->add_option("--out", out_dir, "Output directory (defaults to --in)");

  CLI::App* pre = app.add_subcommand("preset", "Print a preset config document");
  pre->add_option("name", preset_name, "Preset name");
  pre->add_flag("--list", list, "List presets");
  pre->add_option("--out", out_dir, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train(src, seed, epochs, out_dir, effective_jobs(jobs), out, err);
    if (*sweep) return cmd_sweep(src, axis, seeds, epochs, out_dir, effective_jobs(jobs), out, err);
    if (*search) return cmd_search(src, budget, dry, epochs, out_dir, out);
    if (*flops) return cmd_flops(src, json_path, out);
    if (*report) return cmd_report(in_dir, out_dir, out);
    if (*pre) return cmd_preset(preset_name, list, out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SchemaError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ReportError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitAbort;
  }
  return kExitConfig;
}

}  // namespace smoe
