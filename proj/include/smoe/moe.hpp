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

// Experts, MoE and dense heads, backbones and the per-iteration training step.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "smoe/layers.hpp"
#include "smoe/optim.hpp"
#include "smoe/routing.hpp"

namespace smoe {

class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// d_in -> h -> h -> d_out, ReLU and dropout after each hidden layer.
class ExpertMLP {
 public:
  ExpertMLP() = default;
  ExpertMLP(const std::string& name, std::size_t d_in, std::size_t hidden, std::size_t d_out,
            double dropout, RngStream rng, Dtype dtype = Dtype::f32);

  Var forward(const Var& x, bool training);
  std::vector<Parameter> parameters() const;
  std::size_t hidden() const { return fc1_.out_features(); }

 private:
  Linear fc1_, fc2_, fc3_;
  Dropout drop_;
  RngStream rng_;
};

enum class DispatchKind { hard_topk, expert_choice, soft_batch, per_sample_soft };

const char* to_string(DispatchKind kind);
DispatchKind dispatch_kind_from_string(const std::string& s);

struct MoEHeadConfig {
  std::size_t experts = 8;
  std::size_t hidden = 304;
  double dropout = 0.3;
  DispatchKind dispatch = DispatchKind::hard_topk;
  double capacity_factor = 1.064;
  bool enforce_capacity = true;
  ExpertChoiceBasis ec_basis = ExpertChoiceBasis::raw_scores;
  double w_k = 0.5;
  std::size_t d_k = 64;
  bool utility_bias = false;
  double utility_weight = 0.087;
  double lambda_lb = 0.019;
  double lambda_ent = 0.024;
};

struct HeadOutput {
  Var logits;
  Var probs;                         // [B x E] routing probabilities or gate weights
  std::optional<DispatchPlan> plan;  // hard kinds only
  Tensor combine;                    // [B x E] weights actually used, f64
  RoutingStats stats;
  Var lb;   // E * sum f_i p_i; undefined for soft kinds
  Var ent;  // -H(mean p); undefined for soft kinds
  std::vector<std::size_t> top1;  // per sample, argmax of combine
};

class MoEHead {
 public:
  MoEHead() = default;
  MoEHead(const MoEHeadConfig& cfg, std::size_t d_in, std::size_t classes, RngStream rng,
          Dtype dtype = Dtype::f32);

  // Capacity applies only to hard_topk in training mode; expert choice keeps
  // its per-expert budget at evaluation.
  HeadOutput forward(const Var& h, double tau, std::size_t k, bool training);

  std::vector<Parameter> parameters() const;
  std::vector<Parameter> expert_parameters(std::size_t i) const;
  const MoEHeadConfig& config() const { return cfg_; }
  RouterParams& router() { return router_; }
  std::size_t experts() const { return experts_.size(); }

 private:
  HeadOutput forward_hard(const Var& h, double tau, std::size_t k, bool training);
  HeadOutput forward_soft_batch(const Var& h, bool training);
  HeadOutput forward_per_sample(const Var& h, double tau, bool training);

  MoEHeadConfig cfg_;
  std::size_t d_in_ = 0, classes_ = 0;
  RouterParams router_;
  SlotEmbeddings slots_;
  std::vector<ExpertMLP> experts_;
};

enum class DenseHeadKind { plain_fc, mlp_1024_h };

struct DenseHeadSpec {
  DenseHeadKind kind = DenseHeadKind::plain_fc;
  std::size_t hidden = 304;  // h of the 1024 -> h MLP
  double dropout = 0.3;
};

class DenseHead {
 public:
  DenseHead() = default;
  DenseHead(const DenseHeadSpec& spec, std::size_t d_in, std::size_t classes, RngStream rng,
            Dtype dtype = Dtype::f32);
  Var forward(const Var& h, bool training);
  std::vector<Parameter> parameters() const;

 private:
  DenseHeadSpec spec_;
  std::vector<Linear> layers_;
  Dropout drop_;
  RngStream rng_;
};

enum class BackboneFamily { standard, depthwise, identity, external };
enum class Readout { flatten, global_avg_pool };

const char* to_string(BackboneFamily f);

struct BlockSpec {
  std::size_t channels = 0;
  bool batchnorm = false;
  bool pool = true;
};

enum class BankInit { fresh, perturbed };

struct BackboneSpec {
  BackboneFamily family = BackboneFamily::depthwise;
  std::vector<BlockSpec> blocks;
  double width = 1.0;
  std::size_t in_channels = 3, in_h = 32, in_w = 32;
  Readout readout = Readout::flatten;
  // Blocks whose 3x3 conv becomes an expert bank (standard family only).
  std::vector<std::size_t> moe_conv_positions;
  std::size_t moe_experts = 8;
  std::size_t moe_k = 2;
  BankInit moe_init = BankInit::perturbed;
  double moe_noise = 0.10;
  // Declared cost of an external backbone that is not run here.
  std::uint64_t external_flops = 0;
  std::size_t external_features = 0;

  std::size_t scaled_channels(std::size_t block) const;
};

// Output feature width of a spec.
std::size_t backbone_feature_dim(const BackboneSpec& spec);

// bank_i = reference * (1 + noise * eps_i), eps_i ~ N(0, 1) elementwise.
std::vector<Tensor> init_perturbed(const Tensor& reference, double noise_fraction,
                                   std::size_t banks, RngStream& rng);

class MoEConvBank {
 public:
  MoEConvBank() = default;
  MoEConvBank(const std::string& name, std::size_t in_channels, std::size_t out_channels,
              std::size_t experts, std::size_t k, BankInit init, double noise, RngStream& rng,
              Dtype dtype = Dtype::f32);
  // Builds banks from explicit weights [Cout x Cin x 3 x 3] each.
  MoEConvBank(const std::string& name, std::vector<Tensor> bank_weights, std::size_t k,
              RngStream& rng, Dtype dtype = Dtype::f32);

  struct Output {
    Var y;
    DispatchPlan plan;
    Tensor probs;
  };
  Output forward(const Var& x, double tau) const;
  std::vector<Parameter> parameters() const;
  std::size_t experts() const { return banks_.size(); }
  std::size_t k() const { return k_; }
  const Parameter& bank(std::size_t i) const { return banks_[i]; }

 private:
  std::size_t k_ = 2;
  std::vector<Parameter> banks_;
  std::vector<Parameter> biases_;
  Linear router_;
};

struct BackboneTelemetry {
  std::vector<RoutingStats> conv_stats;  // one per expert bank layer
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, RngStream rng, Dtype dtype = Dtype::f32);

  Var forward(const Var& x, bool training, double tau, BackboneTelemetry* tel = nullptr);
  std::vector<Parameter> parameters() const;
  std::size_t feature_dim() const { return feature_dim_; }
  const BackboneSpec& spec() const { return spec_; }

 private:
  struct Block {
    Conv2d conv;       // standard 3x3, or the depthwise 3x3
    Conv2d pointwise;  // depthwise family only
    std::optional<MoEConvBank> bank;
    std::optional<BatchNorm2d> bn;
    bool pool = true;
  };
  BackboneSpec spec_;
  std::vector<Block> blocks_;
  std::size_t feature_dim_ = 0;
};

struct ModelSpec {
  BackboneSpec backbone;
  bool use_moe = true;
  DenseHeadSpec dense;
  MoEHeadConfig moe;
  std::size_t classes = 10;
  Dtype dtype = Dtype::f32;
};

struct ForwardResult {
  Var logits;
  std::optional<HeadOutput> head;
  BackboneTelemetry backbone;
};

class Classifier {
 public:
  Classifier() = default;
  // Backbone and head initialization draw from independent forks of `rng`,
  // so a dense and an MoE model built from one seed share backbone weights.
  Classifier(const ModelSpec& spec, const RngStream& rng);

  ForwardResult forward(const Tensor& x, bool training, double tau, std::size_t k);
  std::vector<Parameter>& parameters() { return params_; }
  const ModelSpec& spec() const { return spec_; }
  MoEHead* moe_head() { return moe_ ? &*moe_ : nullptr; }
  bool has_routing() const;

 private:
  ModelSpec spec_;
  Backbone backbone_;
  std::optional<DenseHead> dense_;
  std::optional<MoEHead> moe_;
  std::vector<Parameter> params_;
};

// Numeric forms of the auxiliary losses.
double loss_load_balance(std::span<const double> f, std::span<const double> p);
double loss_entropy(std::span<const double> pbar);
double loss_total(double ce, double lb, double ent, double lambda_lb, double lambda_ent);

struct Batch {
  Tensor x;
  std::vector<int> y;
};

struct StepReport {
  double loss = 0.0;
  double ce = 0.0;
  double lb = 0.0;
  double ent = 0.0;
  double acc = 0.0;  // fraction correct on the batch
  double tau = 1.0;
  std::size_t k = 1;
  std::size_t overflow = 0;
  RoutingStats stats;  // head routing, empty for dense models
  std::vector<RoutingStats> conv_stats;
};

// One iteration: forward, dispatch, losses, backward, update.
StepReport train_step(Classifier& model, const Batch& batch, double tau, std::size_t k,
                      Optimizer& opt);

}  // namespace smoe
