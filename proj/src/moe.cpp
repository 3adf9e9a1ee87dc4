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

#include "smoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smoe {

namespace {

std::vector<std::size_t> row_argmax(const Tensor& m) {
  const std::size_t b = m.dim(0), e = m.dim(1);
  std::vector<std::size_t> out(b, 0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 1; i < e; ++i)
      if (m[r * e + i] > m[r * e + out[r]]) out[r] = i;
  return out;
}

std::vector<double> column_means(const Tensor& m) {
  const std::size_t b = m.dim(0), e = m.dim(1);
  std::vector<double> out(e, 0.0);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < e; ++i) out[i] += m[r * e + i];
  for (auto& v : out) v /= static_cast<double>(std::max<std::size_t>(1, b));
  return out;
}

RoutingStats soft_stats(const Tensor& w) {
  RoutingStats s;
  s.f = column_means(w);
  s.p = s.f;
  s.entropy = entropy_nats(s.p);
  return s;
}

// sum_i C[:, i] * f_i(x[rows_i]) evaluated only on each expert's rows.
template <typename ExpertFn>
Var dispatch_and_combine(const Var& x, const Var& combine, const DispatchPlan& plan,
                         ExpertFn&& expert) {
  std::vector<Var> parts;
  for (std::size_t i = 0; i < plan.experts; ++i) {
    const auto rows = plan.rows_for(i);
    if (rows.empty()) continue;
    Var yi = expert(i, gather_rows(x, rows));
    Var wi = gather_rows(column(combine, i), rows);
    parts.push_back(scatter_rows(scale_rows(yi, wi), rows, plan.batch));
  }
  return add_n(parts);
}

}  // namespace

ExpertMLP::ExpertMLP(const std::string& name, std::size_t d_in, std::size_t hidden,
                     std::size_t d_out, double dropout, RngStream rng, Dtype dtype)
    : drop_(dropout), rng_(rng.fork("dropout")) {
  RngStream init = rng.fork("init");
  fc1_ = Linear(name + ".fc1", d_in, hidden, init, dtype);
  fc2_ = Linear(name + ".fc2", hidden, hidden, init, dtype);
  fc3_ = Linear(name + ".fc3", hidden, d_out, init, dtype);
}

Var ExpertMLP::forward(const Var& x, bool training) {
  Var a = drop_.forward(relu(fc1_.forward(x)), training, rng_);
  Var b = drop_.forward(relu(fc2_.forward(a)), training, rng_);
  return fc3_.forward(b);
}

std::vector<Parameter> ExpertMLP::parameters() const {
  auto p = fc1_.parameters();
  append(p, fc2_.parameters());
  append(p, fc3_.parameters());
  return p;
}

const char* to_string(DispatchKind kind) {
  switch (kind) {
    case DispatchKind::hard_topk: return "hard_topk";
    case DispatchKind::expert_choice: return "expert_choice";
    case DispatchKind::soft_batch: return "soft_batch";
    case DispatchKind::per_sample_soft: return "per_sample_soft";
  }
  return "?";
}

DispatchKind dispatch_kind_from_string(const std::string& s) {
  for (auto k : {DispatchKind::hard_topk, DispatchKind::expert_choice, DispatchKind::soft_batch,
                 DispatchKind::per_sample_soft})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown dispatch kind '" + s + "'");
}

MoEHead::MoEHead(const MoEHeadConfig& cfg, std::size_t d_in, std::size_t classes, RngStream rng,
                 Dtype dtype)
    : cfg_(cfg), d_in_(d_in), classes_(classes) {
  if (cfg.experts < 1) throw std::invalid_argument("moe head: need at least one expert");
  RngStream r = rng.fork("router");
  router_ = RouterParams::init("router", cfg.experts, d_in, cfg.d_k, r, dtype);
  router_.w_k = cfg.w_k;
  router_.utility_bias_enabled = cfg.utility_bias;
  router_.utility_weight = cfg.utility_weight;
  RngStream s = rng.fork("slots");
  slots_ = SlotEmbeddings::init("moe", cfg.experts, d_in, s, dtype);
  for (std::size_t i = 0; i < cfg.experts; ++i) {
    experts_.emplace_back("expert" + std::to_string(i), d_in, cfg.hidden, classes, cfg.dropout,
                          rng.fork("expert", i), dtype);
  }
}

std::vector<Parameter> MoEHead::parameters() const {
  std::vector<Parameter> p;
  switch (cfg_.dispatch) {
    case DispatchKind::hard_topk:
    case DispatchKind::expert_choice: p = router_.parameters(); break;
    case DispatchKind::soft_batch:
    case DispatchKind::per_sample_soft: p = {slots_.slots}; break;
  }
  for (const auto& e : experts_) append(p, e.parameters());
  return p;
}

std::vector<Parameter> MoEHead::expert_parameters(std::size_t i) const {
  return experts_.at(i).parameters();
}

HeadOutput MoEHead::forward(const Var& h, double tau, std::size_t k, bool training) {
  if (h.shape().size() != 2 || h.dim(1) != d_in_) {
    throw ShapeError("moe head: features " + shape_string(h.shape()) + ", expected width " +
                     std::to_string(d_in_));
  }
  switch (cfg_.dispatch) {
    case DispatchKind::hard_topk:
    case DispatchKind::expert_choice: return forward_hard(h, tau, k, training);
    case DispatchKind::soft_batch: return forward_soft_batch(h, training);
    case DispatchKind::per_sample_soft: return forward_per_sample(h, tau, training);
  }
  throw std::logic_error("moe head: unknown dispatch kind");
}

HeadOutput MoEHead::forward_hard(const Var& h, double tau, std::size_t k, bool training) {
  if (!(tau > 0.0)) throw std::invalid_argument("moe head: tau must be positive");
  const std::size_t b = h.dim(0), e = experts_.size();
  k = std::clamp<std::size_t>(k, 1, e);
  HeadOutput out;
  Var scores = route_scores(h, router_);
  out.probs = softmax(scores, 1, tau);
  Var combine;
  if (cfg_.dispatch == DispatchKind::hard_topk) {
    if (training && cfg_.enforce_capacity) {
      out.plan = dispatch_topk_capacity(out.probs.value(), k,
                                        capacity({cfg_.capacity_factor, k, e, b}));
    } else {
      out.plan = dispatch_topk(out.probs.value(), k);
    }
    combine = masked_renormalize(out.probs, out.plan->mask);
  } else {
    Var scaled = scale(scores, 1.0 / tau);
    const std::size_t cap = cfg_.enforce_capacity ? capacity({cfg_.capacity_factor, k, e, b}) : b;
    out.plan = dispatch_expert_choice(scaled.value(), cap, cfg_.ec_basis);
    combine = masked_softmax(scaled, out.plan->mask);
  }
  out.logits = dispatch_and_combine(h, combine, *out.plan, [&](std::size_t i, const Var& xi) {
    return experts_[i].forward(xi, training);
  });
  out.combine = combine.value().as_dtype(Dtype::f64);
  out.stats = routing_stats(*out.plan, out.probs.value());
  Var pbar = column_mean(out.probs);
  std::vector<double> ef(out.stats.f);
  for (auto& v : ef) v *= static_cast<double>(e);
  out.lb = dot(pbar, ef);
  out.ent = sum_x_log_x(pbar);
  out.top1 = row_argmax(out.combine);
  return out;
}

HeadOutput MoEHead::forward_soft_batch(const Var& h, bool training) {
  HeadOutput out;
  SoftDispatch sd = dispatch_soft_batch(h, slots_.slots.var());
  std::vector<Var> ys;
  for (std::size_t j = 0; j < experts_.size(); ++j) {
    const std::size_t row[] = {j};
    ys.push_back(experts_[j].forward(gather_rows(sd.mixed, row), training));
  }
  out.probs = sd.combine;
  out.logits = matmul(sd.combine, concat_rows(ys));
  out.combine = sd.combine.value().as_dtype(Dtype::f64);
  out.stats = soft_stats(out.combine);
  out.top1 = row_argmax(out.combine);
  return out;
}

HeadOutput MoEHead::forward_per_sample(const Var& h, double tau, bool training) {
  HeadOutput out;
  out.probs = gate_per_sample(h, slots_.slots.var(), tau);
  std::vector<Var> parts;
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    parts.push_back(scale_rows(experts_[i].forward(h, training), column(out.probs, i)));
  }
  out.logits = add_n(parts);
  out.combine = out.probs.value().as_dtype(Dtype::f64);
  out.stats = soft_stats(out.combine);
  out.top1 = row_argmax(out.combine);
  return out;
}

DenseHead::DenseHead(const DenseHeadSpec& spec, std::size_t d_in, std::size_t classes,
                     RngStream rng, Dtype dtype)
    : spec_(spec), drop_(spec.dropout), rng_(rng.fork("dropout")) {
  RngStream init = rng.fork("init");
  if (spec.kind == DenseHeadKind::plain_fc) {
    layers_.emplace_back("dense.fc", d_in, classes, init, dtype);
  } else {
    layers_.emplace_back("dense.fc1", d_in, 1024, init, dtype);
    layers_.emplace_back("dense.fc2", 1024, spec.hidden, init, dtype);
    layers_.emplace_back("dense.fc3", spec.hidden, classes, init, dtype);
  }
}

Var DenseHead::forward(const Var& h, bool training) {
  Var a = h;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    a = drop_.forward(relu(layers_[i].forward(a)), training, rng_);
  }
  return layers_.back().forward(a);
}

std::vector<Parameter> DenseHead::parameters() const {
  std::vector<Parameter> p;
  for (const auto& l : layers_) append(p, l.parameters());
  return p;
}

const char* to_string(BackboneFamily f) {
  switch (f) {
    case BackboneFamily::standard: return "standard";
    case BackboneFamily::depthwise: return "depthwise";
    case BackboneFamily::identity: return "identity";
    case BackboneFamily::external: return "external";
  }
  return "?";
}

std::size_t BackboneSpec::scaled_channels(std::size_t block) const {
  if (!(width > 0.0)) throw std::invalid_argument("backbone: width must be positive");
  const double c = static_cast<double>(blocks.at(block).channels) * width;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(c)));
}

std::size_t backbone_feature_dim(const BackboneSpec& spec) {
  switch (spec.family) {
    case BackboneFamily::external: return spec.external_features;
    case BackboneFamily::identity: return spec.in_channels * spec.in_h * spec.in_w;
    default: break;
  }
  std::size_t c = spec.in_channels, h = spec.in_h, w = spec.in_w;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    c = spec.scaled_channels(i);
    if (spec.blocks[i].pool) {
      if (h < 2 || w < 2) throw ShapeError("backbone: block " + std::to_string(i) + " pools a " +
                                           std::to_string(h) + "x" + std::to_string(w) + " map");
      h /= 2;
      w /= 2;
    }
  }
  return spec.readout == Readout::flatten ? c * h * w : c;
}

std::vector<Tensor> init_perturbed(const Tensor& reference, double noise_fraction,
                                   std::size_t banks, RngStream& rng) {
  if (!(noise_fraction >= 0.0)) throw std::invalid_argument("init_perturbed: negative noise");
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < banks; ++b) {
    Tensor t(reference.shape(), Dtype::f64);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double eps = noise_fraction > 0.0 ? rng.normal() : 0.0;
      t[i] = reference[i] * (1.0 + noise_fraction * eps);
    }
    out.push_back(t.as_dtype(reference.dtype()));
  }
  return out;
}

MoEConvBank::MoEConvBank(const std::string& name, std::size_t in_channels,
                         std::size_t out_channels, std::size_t experts, std::size_t k,
                         BankInit init, double noise, RngStream& rng, Dtype dtype) {
  std::vector<Tensor> weights;
  const Shape shape{out_channels, in_channels, 3, 3};
  if (init == BankInit::fresh) {
    for (std::size_t i = 0; i < experts; ++i)
      weights.push_back(he_uniform(shape, in_channels * 9, rng, dtype));
  } else {
    Tensor reference = he_uniform(shape, in_channels * 9, rng, dtype);
    weights = init_perturbed(reference, noise, experts, rng);
  }
  *this = MoEConvBank(name, std::move(weights), k, rng, dtype);
}

MoEConvBank::MoEConvBank(const std::string& name, std::vector<Tensor> bank_weights,
                         std::size_t k, RngStream& rng, Dtype dtype)
    : k_(k) {
  if (bank_weights.empty()) throw std::invalid_argument("moe conv: no banks");
  const Shape& shape = bank_weights.front().shape();
  if (shape.size() != 4 || shape[2] != 3 || shape[3] != 3) {
    throw ShapeError("moe conv: banks must be [Cout x Cin x 3 x 3]");
  }
  if (k < 1 || k > bank_weights.size()) throw std::invalid_argument("moe conv: need 1 <= k <= E");
  for (std::size_t i = 0; i < bank_weights.size(); ++i) {
    if (bank_weights[i].shape() != shape) throw ShapeError("moe conv: banks differ in shape");
    banks_.emplace_back(name + ".bank" + std::to_string(i), bank_weights[i].as_dtype(dtype));
    biases_.emplace_back(name + ".bias" + std::to_string(i), Tensor::zeros({shape[0]}, dtype));
  }
  router_ = Linear(name + ".router", shape[1], bank_weights.size(), rng, dtype);
}

MoEConvBank::Output MoEConvBank::forward(const Var& x, double tau) const {
  if (x.shape().size() != 4 || x.dim(1) != router_.in_features()) {
    throw ShapeError("moe conv: input " + shape_string(x.shape()) + " for " +
                     std::to_string(router_.in_features()) + " channels");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("moe conv: tau must be positive");
  Output out;
  Var probs = softmax(router_.forward(global_avg_pool(x)), 1, tau);
  out.probs = probs.value().as_dtype(Dtype::f64);
  out.plan = dispatch_topk(probs.value(), k_);
  Var combine = masked_renormalize(probs, out.plan.mask);
  out.y = dispatch_and_combine(x, combine, out.plan, [&](std::size_t i, const Var& xi) {
    return add_channel_bias(conv2d(xi, banks_[i].var(), 1, 1, 1), biases_[i].var());
  });
  return out;
}

std::vector<Parameter> MoEConvBank::parameters() const {
  std::vector<Parameter> p;
  for (std::size_t i = 0; i < banks_.size(); ++i) {
    p.push_back(banks_[i]);
    p.push_back(biases_[i]);
  }
  append(p, router_.parameters());
  return p;
}

Backbone::Backbone(const BackboneSpec& spec, RngStream rng, Dtype dtype) : spec_(spec) {
  if (spec.family == BackboneFamily::external) {
    throw std::invalid_argument("backbone: external backbones are cost-only and cannot run");
  }
  feature_dim_ = backbone_feature_dim(spec);
  if (spec.family == BackboneFamily::identity) return;
  for (std::size_t pos : spec.moe_conv_positions) {
    if (pos >= spec.blocks.size()) throw std::invalid_argument("backbone: moe position out of range");
    if (spec.family != BackboneFamily::standard) {
      throw std::invalid_argument("backbone: expert banks replace standard 3x3 convs only");
    }
  }
  std::size_t cin = spec.in_channels;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const std::size_t cout = spec.scaled_channels(i);
    const std::string name = "block" + std::to_string(i);
    RngStream r = rng.fork(name);
    Block blk;
    blk.pool = spec.blocks[i].pool;
    const bool is_moe = std::find(spec.moe_conv_positions.begin(), spec.moe_conv_positions.end(),
                                  i) != spec.moe_conv_positions.end();
    if (is_moe) {
      blk.bank.emplace(name + ".moe", cin, cout, spec.moe_experts, spec.moe_k, spec.moe_init,
                       spec.moe_noise, r, dtype);
    } else if (spec.family == BackboneFamily::standard) {
      blk.conv = Conv2d(name + ".conv", ConvKind::standard3x3, cin, cout, r, dtype);
    } else {
      blk.conv = Conv2d(name + ".dw", ConvKind::depthwise3x3, cin, cin, r, dtype);
      blk.pointwise = Conv2d(name + ".pw", ConvKind::pointwise1x1, cin, cout, r, dtype);
    }
    if (spec.blocks[i].batchnorm) blk.bn.emplace(name + ".bn", cout, dtype);
    blocks_.push_back(std::move(blk));
    cin = cout;
  }
}

Var Backbone::forward(const Var& x, bool training, double tau, BackboneTelemetry* tel) {
  if (x.shape().size() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_h ||
      x.dim(3) != spec_.in_w) {
    if (!(spec_.family == BackboneFamily::identity && x.shape().size() == 2 &&
          x.dim(1) == feature_dim_)) {
      throw ShapeError("backbone: input " + shape_string(x.shape()) + " does not match spec");
    }
  }
  if (spec_.family == BackboneFamily::identity) return flatten(x);
  Var a = x;
  for (auto& blk : blocks_) {
    if (blk.bank) {
      auto o = blk.bank->forward(a, tau);
      if (tel) tel->conv_stats.push_back(routing_stats(o.plan, o.probs));
      a = o.y;
    } else if (spec_.family == BackboneFamily::standard) {
      a = blk.conv.forward(a);
    } else {
      a = blk.pointwise.forward(relu(blk.conv.forward(a)));
    }
    if (blk.bn) a = blk.bn->forward(a, training);
    a = relu(a);
    if (blk.pool) a = maxpool2x2(a);
  }
  return spec_.readout == Readout::flatten ? flatten(a) : global_avg_pool(a);
}

std::vector<Parameter> Backbone::parameters() const {
  std::vector<Parameter> p;
  for (const auto& blk : blocks_) {
    if (blk.bank) {
      append(p, blk.bank->parameters());
    } else {
      append(p, blk.conv.parameters());
      if (spec_.family == BackboneFamily::depthwise) append(p, blk.pointwise.parameters());
    }
    if (blk.bn) append(p, blk.bn->parameters());
  }
  return p;
}

Classifier::Classifier(const ModelSpec& spec, const RngStream& rng) : spec_(spec) {
  backbone_ = Backbone(spec.backbone, rng.fork("backbone"), spec.dtype);
  params_ = backbone_.parameters();
  if (spec.use_moe) {
    moe_.emplace(spec.moe, backbone_.feature_dim(), spec.classes, rng.fork("head"), spec.dtype);
    append(params_, moe_->parameters());
  } else {
    dense_.emplace(spec.dense, backbone_.feature_dim(), spec.classes, rng.fork("head"), spec.dtype);
    append(params_, dense_->parameters());
  }
}

bool Classifier::has_routing() const {
  return moe_.has_value() || !spec_.backbone.moe_conv_positions.empty();
}

ForwardResult Classifier::forward(const Tensor& x, bool training, double tau, std::size_t k) {
  ForwardResult out;
  Var h = backbone_.forward(Var(x.as_dtype(spec_.dtype), false), training, tau, &out.backbone);
  if (moe_) {
    out.head = moe_->forward(h, tau, k, training);
    out.logits = out.head->logits;
  } else {
    out.logits = dense_->forward(h, training);
  }
  return out;
}

double loss_load_balance(std::span<const double> f, std::span<const double> p) {
  if (f.size() != p.size()) throw ShapeError("loss_load_balance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * p[i];
  return static_cast<double>(f.size()) * s;
}

double loss_entropy(std::span<const double> pbar) {
  for (double v : pbar)
    if (v < 0.0) throw std::invalid_argument("loss_entropy: negative probability");
  return -entropy_nats(pbar);
}

double loss_total(double ce, double lb, double ent, double lambda_lb, double lambda_ent) {
  return ce + lambda_lb * lb + lambda_ent * ent;
}

StepReport train_step(Classifier& model, const Batch& batch, double tau, std::size_t k,
                      Optimizer& opt) {
  if (batch.y.empty()) throw std::invalid_argument("train_step: empty batch");
  StepReport rep;
  rep.tau = tau;
  rep.k = k;
  auto& params = model.parameters();
  try {
    zero_grads(params);
    ForwardResult fr = model.forward(batch.x, true, tau, k);
    Var ce = cross_entropy(fr.logits, batch.y);
    Var loss = ce;
    rep.ce = ce.item();
    if (fr.head && fr.head->lb.defined()) {
      const auto& cfg = model.moe_head()->config();
      rep.lb = fr.head->lb.item();
      rep.ent = fr.head->ent.item();
      std::vector<Var> terms{ce, scale(fr.head->lb, cfg.lambda_lb),
                             scale(fr.head->ent, cfg.lambda_ent)};
      loss = add_n(terms);
    }
    rep.loss = loss.item();
    backward(loss);
    opt.step(params);

    if (fr.head) {
      rep.stats = fr.head->stats;
      if (fr.head->plan) rep.overflow = fr.head->plan->overflow_rows.size();
      MoEHead* head = model.moe_head();
      if (head->config().utility_bias) {
        std::vector<double> norms(head->experts(), 0.0);
        for (std::size_t i = 0; i < head->experts(); ++i) {
          for (auto& p : head->expert_parameters(i))
            for (double g : p.grad().values()) norms[i] += g * g;
          norms[i] = std::sqrt(norms[i]);
        }
        update_utility(head->router(), norms);
      }
    }
    rep.conv_stats = fr.backbone.conv_stats;
    const std::size_t c = fr.logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batch.y.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (fr.logits.value()[b * c + j] > fr.logits.value()[b * c + best]) best = j;
      correct += static_cast<int>(best) == batch.y[b] ? 1 : 0;
    }
    rep.acc = static_cast<double>(correct) / static_cast<double>(batch.y.size());
  } catch (const NumericError& e) {
    throw TrainingAbort(std::string("non-finite value during training step (tau=") +
                        std::to_string(tau) + ", k=" + std::to_string(k) + ", ce=" +
                        std::to_string(rep.ce) + ", lb=" + std::to_string(rep.lb) + ", ent=" +
                        std::to_string(rep.ent) + "): " + e.what());
  }
  return rep;
}

}  // namespace smoe
