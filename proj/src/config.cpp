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

#include "smoe/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <utility>
#include <vector>

#include "json.hpp"

namespace smoe {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

template <class T>
using EnumTable = std::vector<std::pair<const char*, T>>;

const EnumTable<BackboneFamily> kFamilies{{"standard", BackboneFamily::standard},
                                          {"depthwise", BackboneFamily::depthwise},
                                          {"identity", BackboneFamily::identity},
                                          {"external", BackboneFamily::external}};
const EnumTable<Readout> kReadouts{{"flatten", Readout::flatten},
                                   {"global_avg_pool", Readout::global_avg_pool}};
const EnumTable<BankInit> kBankInits{{"fresh", BankInit::fresh}, {"perturbed", BankInit::perturbed}};
const EnumTable<DenseHeadKind> kDenseKinds{{"plain_fc", DenseHeadKind::plain_fc},
                                           {"mlp_1024_h", DenseHeadKind::mlp_1024_h}};
const EnumTable<DispatchKind> kDispatch{{"hard_topk", DispatchKind::hard_topk},
                                        {"expert_choice", DispatchKind::expert_choice},
                                        {"soft_batch", DispatchKind::soft_batch},
                                        {"per_sample_soft", DispatchKind::per_sample_soft}};
const EnumTable<ExpertChoiceBasis> kBases{{"raw_scores", ExpertChoiceBasis::raw_scores},
                                          {"probabilities", ExpertChoiceBasis::probabilities}};
const EnumTable<ScheduleKind> kSchedKinds{{"linear", ScheduleKind::linear},
                                          {"sigmoid", ScheduleKind::sigmoid}};
const EnumTable<ScheduleUnit> kUnits{{"epoch", ScheduleUnit::epoch}, {"step", ScheduleUnit::step}};
const EnumTable<OptimizerKind> kOptKinds{{"adam", OptimizerKind::adam},
                                         {"sgd_momentum", OptimizerKind::sgd_momentum}};
const EnumTable<Dtype> kDtypes{{"f32", Dtype::f32}, {"f64", Dtype::f64}};
const EnumTable<DatasetKind> kDatasets{{"cifar10_binary", DatasetKind::cifar10_binary},
                                       {"cifar100_binary", DatasetKind::cifar100_binary},
                                       {"synthetic_clusters", DatasetKind::synthetic_clusters}};
const EnumTable<EvalMetric> kMetrics{{"final_epoch", EvalMetric::final_epoch},
                                     {"peak_validation", EvalMetric::peak_validation}};

template <class T>
const char* name_of(const EnumTable<T>& table, T v) {
  for (const auto& [n, e] : table)
    if (e == v) return n;
  return "?";
}

// Tracks which keys of one JSON object were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<document>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    read(j_.at(key), key_path(key), dst);
  }

  template <class T>
  void get_enum(const std::string& key, T& dst, const EnumTable<T>& table) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    if (v.is_string()) {
      for (const auto& [n, e] : table) {
        if (v.get<std::string>() == n) {
          dst = e;
          return;
        }
      }
    }
    std::string allowed;
    for (const auto& [n, e] : table) allowed += std::string(allowed.empty() ? "" : ", ") + n;
    throw ConfigError(key_path(key), "expected one of " + allowed);
  }

  Reader sub(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, key_path(key));
  }

  const json* raw(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError(key_path(item.key()), "unknown key");
    }
  }

  static void read(const json& v, const std::string& path, double& d) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    d = v.get<double>();
  }
  static void read(const json& v, const std::string& path, bool& b) {
    if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
    b = v.get<bool>();
  }
  static void read(const json& v, const std::string& path, std::size_t& n) {
    if (!v.is_number_unsigned()) throw ConfigError(path, "expected a non-negative integer");
    n = v.get<std::size_t>();
  }
  static void read(const json& v, const std::string& path, std::string& s) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    s = v.get<std::string>();
  }
  static void read(const json& v, const std::string& path, std::vector<std::size_t>& out) {
    if (!v.is_array()) throw ConfigError(path, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t x = 0;
      read(v[i], path + "[" + std::to_string(i) + "]", x);
      out.push_back(x);
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& key, const std::string& msg) {
  if (!ok) throw ConfigError(key, msg);
}

void read_range(Reader r, ParamRange& p) {
  r.get("lower", p.lower);
  r.get("upper", p.upper);
  r.get("sigma", p.sigma);
  r.finish();
  require(p.lower < p.upper, r.key_path("upper"), "must exceed lower");
  require(p.sigma >= 0.0, r.key_path("sigma"), "must be non-negative");
}

void parse_document(const json& root, ConfigDocument& doc) {
  Reader top(root, "");
  std::size_t version = 0;
  require(top.has("schema_version"), "schema_version", "missing required key");
  top.get("schema_version", version);
  require(version == kConfigSchemaVersion, "schema_version",
          "unsupported version " + std::to_string(version) + " (expected " +
              std::to_string(kConfigSchemaVersion) + ")");
  ExperimentConfig& c = doc.experiment;
  top.get("experiment_id", c.experiment_id);

  {
    Reader d = top.sub("dataset");
    d.get_enum("kind", c.dataset.kind, kDatasets);
    d.get("root", c.dataset.root);
    d.get("train_limit", c.dataset.train_limit);
    d.get("test_limit", c.dataset.test_limit);
    if (const json* cs = d.raw("checksums")) {
      require(cs->is_object(), d.key_path("checksums"), "expected an object of strings");
      for (const auto& item : cs->items()) {
        std::string v;
        Reader::read(item.value(), d.key_path("checksums") + "." + item.key(), v);
        c.dataset.checksums[item.key()] = v;
      }
    }
    Reader s = d.sub("synthetic");
    SyntheticParams& sp = c.dataset.synthetic;
    s.get("clusters", sp.clusters);
    s.get("classes", sp.classes);
    s.get("dim", sp.dim);
    s.get("noise_std", sp.noise_std);
    s.get("centroid_std", sp.centroid_std);
    s.get("train_per_class", sp.train_per_class);
    s.get("test_per_class", sp.test_per_class);
    s.get("seed", sp.seed);
    s.finish();
    d.finish();
  }

  {
    Reader b = top.sub("backbone");
    BackboneSpec& bb = c.model.backbone;
    b.get_enum("family", bb.family, kFamilies);
    if (const json* blocks = b.raw("blocks")) {
      require(blocks->is_array(), b.key_path("blocks"), "expected an array");
      bb.blocks.clear();
      for (std::size_t i = 0; i < blocks->size(); ++i) {
        Reader blk((*blocks)[i], b.key_path("blocks") + "[" + std::to_string(i) + "]");
        BlockSpec s;
        blk.get("channels", s.channels);
        blk.get("batchnorm", s.batchnorm);
        blk.get("pool", s.pool);
        blk.finish();
        require(s.channels > 0, blk.key_path("channels"), "must be >= 1");
        bb.blocks.push_back(s);
      }
    }
    b.get("width", bb.width);
    b.get_enum("readout", bb.readout, kReadouts);
    b.get("in_channels", bb.in_channels);
    b.get("in_height", bb.in_h);
    b.get("in_width", bb.in_w);
    b.get("moe_conv_positions", bb.moe_conv_positions);
    b.get("moe_experts", bb.moe_experts);
    b.get("moe_k", bb.moe_k);
    b.get_enum("moe_init", bb.moe_init, kBankInits);
    b.get("moe_noise", bb.moe_noise);
    b.get("external_flops", bb.external_flops);
    b.get("external_features", bb.external_features);
    b.finish();
    require(bb.width > 0.0, b.key_path("width"), "must be positive");
  }

  {
    Reader h = top.sub("head");
    h.get("use_moe", c.model.use_moe);
    h.get_enum("dense_kind", c.model.dense.kind, kDenseKinds);
    h.get("dense_hidden", c.model.dense.hidden);
    h.get("dense_dropout", c.model.dense.dropout);
    h.get("experts", c.model.moe.experts);
    h.get("hidden", c.model.moe.hidden);
    h.get("dropout", c.model.moe.dropout);
    h.finish();
    require(c.model.moe.experts >= 1, h.key_path("experts"), "must be >= 1");
  }

  {
    Reader r = top.sub("routing");
    MoEHeadConfig& m = c.model.moe;
    r.get_enum("dispatch", m.dispatch, kDispatch);
    r.get("k", c.k);
    r.get("capacity_factor", m.capacity_factor);
    r.get("enforce_capacity", m.enforce_capacity);
    r.get_enum("expert_choice_basis", m.ec_basis, kBases);
    r.get("w_k", m.w_k);
    r.get("d_k", m.d_k);
    r.get("utility_bias", m.utility_bias);
    r.get("utility_weight", m.utility_weight);
    r.finish();
    require(c.k >= 1 && c.k <= m.experts, r.key_path("k"), "must lie in [1, head.experts]");
    require(m.capacity_factor > 0.0, r.key_path("capacity_factor"), "must be positive");
    require(m.d_k >= 1, r.key_path("d_k"), "must be >= 1");
  }

  {
    Reader s = top.sub("schedules");
    Reader t = s.sub("temperature");
    TemperatureSchedule& ts = c.temperature;
    t.get_enum("kind", ts.kind, kSchedKinds);
    t.get("tau_max", ts.tau_max);
    t.get("tau_min", ts.tau_min);
    t.get("kappa", ts.kappa);
    t.get("horizon", ts.horizon);
    t.get_enum("unit", ts.unit, kUnits);
    t.get("clamp_endpoints", ts.clamp_endpoints);
    t.finish();
    require(ts.tau_min > 0.0 && ts.tau_max >= ts.tau_min, t.key_path("tau_min"),
            "need 0 < tau_min <= tau_max");
    Reader w = s.sub("warmup");
    w.get("enabled", c.warmup_enabled);
    w.get("epochs", c.warmup.warmup_epochs);
    w.get("k_start", c.warmup.k_start);
    w.finish();
    require(c.warmup.k_start >= 1 && c.warmup.k_start <= c.model.moe.experts,
            w.key_path("k_start"), "must lie in [1, head.experts]");
    s.finish();
  }

  {
    Reader l = top.sub("losses");
    l.get("lambda_lb", c.model.moe.lambda_lb);
    l.get("lambda_ent", c.model.moe.lambda_ent);
    l.finish();
  }

  {
    Reader o = top.sub("optimizer");
    OptimizerConfig& oc = c.optimizer;
    o.get_enum("kind", oc.kind, kOptKinds);
    o.get("lr", oc.lr);
    o.get("momentum", oc.momentum);
    o.get("beta1", oc.beta1);
    o.get("beta2", oc.beta2);
    o.get("eps", oc.eps);
    o.get("cosine", oc.cosine);
    o.get("total_steps", oc.total_steps);
    o.get("lr_floor", oc.lr_floor);
    o.finish();
    require(oc.lr > 0.0, o.key_path("lr"), "must be positive");
  }

  {
    Reader r = top.sub("run");
    r.get("epochs", c.epochs);
    r.get("batch", c.batch);
    if (r.has("seeds")) {
      std::vector<std::size_t> seeds;
      r.get("seeds", seeds);
      c.seeds.assign(seeds.begin(), seeds.end());
    }
    r.get_enum("metric", c.metric, kMetrics);
    r.get_enum("dtype", c.model.dtype, kDtypes);
    Reader a = r.sub("augment");
    a.get("enabled", c.augment_enabled);
    a.get("flip", c.augment.flip);
    a.get("crop_pad", c.augment.crop_pad);
    a.finish();
    r.finish();
    require(c.epochs >= 1, r.key_path("epochs"), "must be >= 1");
    require(c.batch >= 1, r.key_path("batch"), "must be >= 1");
    require(!c.seeds.empty(), r.key_path("seeds"), "must not be empty");
  }

  {
    Reader o = top.sub("output");
    o.get("dir", c.output_dir);
    o.finish();
  }

  {
    Reader s = top.sub("search");
    SearchSettings& ss = doc.search;
    s.get("population", ss.ga.population);
    s.get("elites", ss.ga.elites);
    s.get("budget", ss.ga.budget);
    s.get("epochs", ss.epochs);
    s.get("seed", ss.seed);
    s.get("utility", ss.space.utility);
    Reader f = s.sub("fitness");
    f.get("r_target", ss.fitness.r_target);
    f.get("g_target", ss.fitness.g_target);
    f.get("lambda_red", ss.fitness.lambda_red);
    f.get("lambda_gap", ss.fitness.lambda_gap);
    f.finish();
    Reader sp = s.sub("space");
    for (std::size_t i = 0; i < kGeneCount; ++i) {
      const Gene g = static_cast<Gene>(i);
      if (sp.has(to_string(g))) read_range(sp.sub(to_string(g)), ss.space.range(g));
    }
    sp.finish();
    s.finish();
    require(ss.ga.elites >= 1 && ss.ga.elites < ss.ga.population, s.key_path("elites"),
            "need 1 <= elites < population");
    require(ss.ga.budget >= ss.ga.population, s.key_path("budget"), "must be >= population");
  }
  {
    Reader f = top.sub("flops");
    FlopsSettings& fs = doc.flops;
    f.get("count_router", fs.count_router);
    if (const json* k = f.raw("k"); k && !k->is_null()) {
      std::size_t v = 0;
      Reader::read(*k, f.key_path("k"), v);
      require(v >= 1, f.key_path("k"), "must be >= 1");
      fs.k = v;
    }
    if (const json* h = f.raw("head_routed"); h && !h->is_null()) {
      bool v = false;
      Reader::read(*h, f.key_path("head_routed"), v);
      fs.head_routed = v;
    }
    if (const json* n = f.raw("classes"); n && !n->is_null()) {
      std::size_t v = 0;
      Reader::read(*n, f.key_path("classes"), v);
      require(v >= 1, f.key_path("classes"), "must be >= 1");
      fs.classes = v;
    }
    f.finish();
  }
  top.finish();
}

ojson range_json(const ParamRange& r) {
  ojson j;
  j["lower"] = r.lower;
  j["upper"] = r.upper;
  j["sigma"] = r.sigma;
  return j;
}

ojson document_json(const ConfigDocument& doc, bool for_hash) {
  const ExperimentConfig& c = doc.experiment;
  ojson j;
  j["schema_version"] = kConfigSchemaVersion;
  j["experiment_id"] = c.experiment_id;

  ojson d;
  d["kind"] = name_of(kDatasets, c.dataset.kind);
  d["root"] = c.dataset.root;
  d["train_limit"] = c.dataset.train_limit;
  d["test_limit"] = c.dataset.test_limit;
  d["checksums"] = ojson::object();
  for (const auto& [k, v] : c.dataset.checksums) d["checksums"][k] = v;
  const SyntheticParams& sp = c.dataset.synthetic;
  d["synthetic"] = {{"clusters", sp.clusters},
                    {"classes", sp.classes},
                    {"dim", sp.dim},
                    {"noise_std", sp.noise_std},
                    {"centroid_std", sp.centroid_std},
                    {"train_per_class", sp.train_per_class},
                    {"test_per_class", sp.test_per_class},
                    {"seed", sp.seed}};
  j["dataset"] = d;

  const BackboneSpec& bb = c.model.backbone;
  ojson b;
  b["family"] = name_of(kFamilies, bb.family);
  b["blocks"] = ojson::array();
  for (const auto& s : bb.blocks)
    b["blocks"].push_back({{"channels", s.channels}, {"batchnorm", s.batchnorm}, {"pool", s.pool}});
  b["width"] = bb.width;
  b["readout"] = name_of(kReadouts, bb.readout);
  b["in_channels"] = bb.in_channels;
  b["in_height"] = bb.in_h;
  b["in_width"] = bb.in_w;
  b["moe_conv_positions"] = bb.moe_conv_positions;
  b["moe_experts"] = bb.moe_experts;
  b["moe_k"] = bb.moe_k;
  b["moe_init"] = name_of(kBankInits, bb.moe_init);
  b["moe_noise"] = bb.moe_noise;
  b["external_flops"] = bb.external_flops;
  b["external_features"] = bb.external_features;
  j["backbone"] = b;

  const MoEHeadConfig& m = c.model.moe;
  j["head"] = {{"use_moe", c.model.use_moe},
               {"dense_kind", name_of(kDenseKinds, c.model.dense.kind)},
               {"dense_hidden", c.model.dense.hidden},
               {"dense_dropout", c.model.dense.dropout},
               {"experts", m.experts},
               {"hidden", m.hidden},
               {"dropout", m.dropout}};
  j["routing"] = {{"dispatch", name_of(kDispatch, m.dispatch)},
                  {"k", c.k},
                  {"capacity_factor", m.capacity_factor},
                  {"enforce_capacity", m.enforce_capacity},
                  {"expert_choice_basis", name_of(kBases, m.ec_basis)},
                  {"w_k", m.w_k},
                  {"d_k", m.d_k},
                  {"utility_bias", m.utility_bias},
                  {"utility_weight", m.utility_weight}};
  const TemperatureSchedule& ts = c.temperature;
  ojson sched;
  sched["temperature"] = {{"kind", name_of(kSchedKinds, ts.kind)},
                          {"tau_max", ts.tau_max},
                          {"tau_min", ts.tau_min},
                          {"kappa", ts.kappa},
                          {"horizon", ts.horizon},
                          {"unit", name_of(kUnits, ts.unit)},
                          {"clamp_endpoints", ts.clamp_endpoints}};
  sched["warmup"] = {{"enabled", c.warmup_enabled},
                     {"epochs", c.warmup.warmup_epochs},
                     {"k_start", c.warmup.k_start}};
  j["schedules"] = sched;
  j["losses"] = {{"lambda_lb", m.lambda_lb}, {"lambda_ent", m.lambda_ent}};
  const OptimizerConfig& oc = c.optimizer;
  j["optimizer"] = {{"kind", name_of(kOptKinds, oc.kind)},
                    {"lr", oc.lr},
                    {"momentum", oc.momentum},
                    {"beta1", oc.beta1},
                    {"beta2", oc.beta2},
                    {"eps", oc.eps},
                    {"cosine", oc.cosine},
                    {"total_steps", oc.total_steps},
                    {"lr_floor", oc.lr_floor}};
  ojson run;
  run["epochs"] = c.epochs;
  run["batch"] = c.batch;
  if (!for_hash) run["seeds"] = c.seeds;
  run["metric"] = name_of(kMetrics, c.metric);
  run["dtype"] = name_of(kDtypes, c.model.dtype);
  run["augment"] = {{"enabled", c.augment_enabled},
                    {"flip", c.augment.flip},
                    {"crop_pad", c.augment.crop_pad}};
  j["run"] = run;
  if (for_hash) return j;
  j["output"] = {{"dir", c.output_dir}};

  const SearchSettings& ss = doc.search;
  ojson s;
  s["population"] = ss.ga.population;
  s["elites"] = ss.ga.elites;
  s["budget"] = ss.ga.budget;
  s["epochs"] = ss.epochs;
  s["seed"] = ss.seed;
  s["utility"] = ss.space.utility;
  s["fitness"] = {{"r_target", ss.fitness.r_target},
                  {"g_target", ss.fitness.g_target},
                  {"lambda_red", ss.fitness.lambda_red},
                  {"lambda_gap", ss.fitness.lambda_gap}};
  ojson space;
  for (std::size_t i = 0; i < kGeneCount; ++i) {
    const Gene g = static_cast<Gene>(i);
    space[to_string(g)] = range_json(ss.space.range(g));
  }
  s["space"] = space;
  j["search"] = s;
  const FlopsSettings& fs = doc.flops;
  j["flops"] = {{"count_router", fs.count_router},
                {"k", fs.k ? ojson(*fs.k) : ojson(nullptr)},
                {"head_routed", fs.head_routed ? ojson(*fs.head_routed) : ojson(nullptr)},
                {"classes", fs.classes ? ojson(*fs.classes) : ojson(nullptr)}};
  return j;
}

}  // namespace

ConfigDocument parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  ConfigDocument doc;
  parse_document(root, doc);
  return doc;
}

ConfigDocument load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<document>", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ConfigDocument& doc, int indent) {
  return document_json(doc, false).dump(indent) + (indent >= 0 ? "\n" : "");
}

FlopsOptions flops_options(const ConfigDocument& doc) {
  FlopsOptions o;
  o.count_router = doc.flops.count_router;
  o.k = doc.flops.k.value_or(doc.experiment.k);
  o.head_routed = doc.flops.head_routed;
  return o;
}

std::string config_hash(const ExperimentConfig& cfg) {
  ConfigDocument doc;
  doc.experiment = cfg;
  const std::string text = document_json(doc, true).dump();
  return fnv1a64_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace smoe
