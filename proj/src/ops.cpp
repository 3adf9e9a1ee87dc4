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

#include "smoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "smoe/kernels.hpp"

namespace smoe {

namespace {

Dtype promote(Dtype a, Dtype b) { return (a == Dtype::f64 || b == Dtype::f64) ? Dtype::f64 : Dtype::f32; }

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  require(x.shape().size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_string(x.shape()));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

std::size_t row_width(const Shape& s) {
  std::size_t w = 1;
  for (std::size_t i = 1; i < s.size(); ++i) w *= s[i];
  return w;
}

}  // namespace

std::size_t conv_kernel_size(ConvKind kind) { return kind == ConvKind::pointwise1x1 ? 1 : 3; }

const char* to_string(ConvKind kind) {
  switch (kind) {
    case ConvKind::standard3x3: return "standard3x3";
    case ConvKind::depthwise3x3: return "depthwise3x3";
    case ConvKind::pointwise1x1: return "pointwise1x1";
  }
  return "?";
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
  Tensor out({m, n}, promote(a.dtype(), b.dtype()));
  kernels::gemm({m, n, k, false, false, false}, a.value().data(), b.value().data(), out.data());
  return make_result("matmul", std::move(out), {a, b}, [m, n, k](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      kernels::gemm({m, k, n, false, true, true}, self.grad.data(), pb.value.data(),
                    pa.grad_buffer().data());
    }
    if (pb.requires_grad) {
      kernels::gemm({k, n, m, true, false, true}, pa.value.data(), self.grad.data(),
                    pb.grad_buffer().data());
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimensions " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()) + "^T");
  Tensor out({m, n}, promote(a.dtype(), b.dtype()));
  kernels::gemm({m, n, k, false, true, false}, a.value().data(), b.value().data(), out.data());
  return make_result("matmul_nt", std::move(out), {a, b}, [m, n, k](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      kernels::gemm({m, k, n, false, false, true}, self.grad.data(), pb.value.data(),
                    pa.grad_buffer().data());
    }
    if (pb.requires_grad) {
      kernels::gemm({n, k, m, true, false, true}, self.grad.data(), pa.value.data(),
                    pb.grad_buffer().data());
    }
  });
}

Var transpose(const Var& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c, r}, x.dtype());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
  return make_result("transpose", std::move(out), {x}, [r, c](Node& self) {
    Node& p = parent(self, 0);
    double* g = p.grad_buffer().data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      Node& p = parent(self, i);
      if (p.requires_grad) p.accumulate(self.grad.values());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result("sub", std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad.values());
    if (pb.requires_grad) {
      double* g = pb.grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()));
  Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result("mul", std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      double* g = pa.grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      double* g = pb.grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out(x.shape(), x.dtype());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
  return make_result("scale", std::move(out), {x}, [s](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Var add_n(std::span<const Var> xs) {
  require(!xs.empty(), "add_n: no inputs");
  Dtype dt = xs[0].dtype();
  for (const auto& x : xs) {
    require(x.shape() == xs[0].shape(), "add_n: shape mismatch");
    dt = promote(dt, x.dtype());
  }
  Tensor out(xs[0].shape(), dt);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.value()[i];
  return make_result("add_n", std::move(out), std::vector<Var>(xs.begin(), xs.end()),
                     [](Node& self) {
                       for (auto& p : self.parents)
                         if (p->requires_grad) p->accumulate(self.grad.values());
                     });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  require(bias.size() == d, "add_row_bias: bias size " + std::to_string(bias.size()) +
                                " for width " + std::to_string(d));
  Tensor out(x.shape(), promote(x.dtype(), bias.dtype()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] + bias.value()[j];
  return make_result("add_row_bias", std::move(out), {x, bias}, [n, d](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) px.accumulate(self.grad.values());
    if (pb.requires_grad) {
      double* g = pb.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  require_rank(x, 4, "add_channel_bias");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(bias.size() == c, "add_channel_bias: bias size mismatch");
  Tensor out(x.shape(), promote(x.dtype(), bias.dtype()));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < hw; ++s) {
        const std::size_t idx = (i * c + ch) * hw + s;
        out[idx] = x.value()[idx] + bias.value()[ch];
      }
  return make_result("add_channel_bias", std::move(out), {x, bias}, [b, c, hw](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) px.accumulate(self.grad.values());
    if (pb.requires_grad) {
      double* g = pb.grad_buffer().data();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t s = 0; s < hw; ++s) g[ch] += self.grad[(i * c + ch) * hw + s];
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x.shape(), x.dtype());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.value()[i]);
  return make_result("relu", std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    double* g = p.grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  return make_result("sum", Tensor::scalar(acc, x.dtype()), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    const double g0 = self.grad[0];
    double* g = p.grad_buffer().data();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += g0;
  });
}

Var mean(const Var& x) {
  require(x.size() > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var column_mean(const Var& x) {
  require_rank(x, 2, "column_mean");
  const std::size_t r = x.dim(0), c = x.dim(1);
  require(r > 0, "column_mean: no rows");
  Tensor out({c}, x.dtype());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.value()[i * c + j];
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return make_result("column_mean", std::move(out), {x}, [r, c](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j] * inv;
  });
}

Var dot(const Var& x, std::span<const double> c) {
  require(x.size() == c.size(), "dot: length mismatch " + std::to_string(x.size()) + " vs " +
                                    std::to_string(c.size()));
  std::vector<double> coeff(c.begin(), c.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < coeff.size(); ++i) acc += x.value()[i] * coeff[i];
  return make_result("dot", Tensor::scalar(acc, x.dtype()), {x},
                     [coeff = std::move(coeff)](Node& self) {
                       double* g = parent(self, 0).grad_buffer().data();
                       for (std::size_t i = 0; i < coeff.size(); ++i) g[i] += self.grad[0] * coeff[i];
                     });
}

Var sum_x_log_x(const Var& p) {
  double acc = 0.0;
  for (double v : p.value().values()) {
    if (v < 0.0) throw std::invalid_argument("sum_x_log_x: negative entry " + std::to_string(v));
    if (v > 0.0) acc += v * std::log(v);
  }
  return make_result("sum_x_log_x", Tensor::scalar(acc, p.dtype()), {p}, [](Node& self) {
    Node& pp = parent(self, 0);
    double* g = pp.grad_buffer().data();
    for (std::size_t i = 0; i < pp.value.size(); ++i) {
      const double v = std::max(pp.value[i], 1e-12);
      g[i] += self.grad[0] * (std::log(v) + 1.0);
    }
  });
}

Var dropout(const Var& x, double p, bool training, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
  Tensor out(x.shape(), x.dtype());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
  return make_result("dropout", std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
                bool training) {
  require_rank(x, 4, "batchnorm2d");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.size() == c && beta.size() == c, "batchnorm2d: affine size mismatch");
  if (state.running_mean.size() != c) state.running_mean = Tensor::zeros({c}, Dtype::f64);
  if (state.running_var.size() != c) state.running_var = Tensor::full({c}, 1.0, Dtype::f64);
  const std::size_t count = b * hw;
  require(count > 0, "batchnorm2d: empty input");
  if (training && count < 2) throw ShapeError("batchnorm2d: need more than one value per channel");

  std::vector<double> mu(c), inv_std(c);
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m = 0.0, v = 0.0;
    if (training) {
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < hw; ++s) m += xv[(i * c + ch) * hw + s];
      m /= static_cast<double>(count);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < hw; ++s) {
          const double d = xv[(i * c + ch) * hw + s] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * m;
      state.running_var[ch] =
          (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
    } else {
      m = state.running_mean[ch];
      v = state.running_var[ch];
    }
    mu[ch] = m;
    inv_std[ch] = 1.0 / std::sqrt(v + state.eps);
  }

  Tensor xhat(x.shape(), Dtype::f64);
  Tensor out(x.shape(), promote(x.dtype(), gamma.dtype()));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < hw; ++s) {
        const std::size_t idx = (i * c + ch) * hw + s;
        xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
        out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
      }
  return make_result(
      "batchnorm2d", std::move(out), {x, gamma, beta},
      [b, c, hw, count, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t s = 0; s < hw; ++s) {
              const std::size_t idx = (i * c + ch) * hw + s;
              sum_dy[ch] += self.grad[idx];
              sum_dy_xhat[ch] += self.grad[idx] * xhat[idx];
            }
        if (pg.requires_grad) {
          double* g = pg.grad_buffer().data();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
        }
        if (pb.requires_grad) {
          double* g = pb.grad_buffer().data();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
        }
        if (px.requires_grad) {
          double* g = px.grad_buffer().data();
          const double n = static_cast<double>(count);
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double gam = pg.value[ch];
              for (std::size_t s = 0; s < hw; ++s) {
                const std::size_t idx = (i * c + ch) * hw + s;
                if (training) {
                  g[idx] += gam * inv_std[ch] / n *
                            (n * self.grad[idx] - sum_dy[ch] - xhat[idx] * sum_dy_xhat[ch]);
                } else {
                  g[idx] += gam * inv_std[ch] * self.grad[idx];
                }
              }
            }
        }
      });
}

Var maxpool2x2(const Var& x) {
  require_rank(x, 4, "maxpool2x2");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 2 && w >= 2, "maxpool2x2: spatial size below 2 in " + shape_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({b, c, oh, ow}, x.dtype());
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.value();
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = plane * h * w + (2 * oy + dy) * w + (2 * ox + dx);
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  }
  return make_result("maxpool2x2", std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, c}, x.dtype());
  for (std::size_t p = 0; p < b * c; ++p) {
    double acc = 0.0;
    for (std::size_t s = 0; s < hw; ++s) acc += x.value()[p * hw + s];
    out[p] = acc / static_cast<double>(hw);
  }
  return make_result("global_avg_pool", std::move(out), {x}, [b, c, hw](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < b * c; ++p)
      for (std::size_t s = 0; s < hw; ++s) g[p * hw + s] += self.grad[p] * inv;
  });
}

Var softmax(const Var& x, std::size_t axis, double temperature) {
  require_rank(x, 2, "softmax");
  require(axis < 2, "softmax: axis must be 0 or 1");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("softmax: temperature must be positive");
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  // Walk "lines" along the softmax axis: rows when axis == 1, columns otherwise.
  const std::size_t lines = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  auto base = [=](std::size_t line) { return axis == 1 ? line * c : line; };
  Tensor out(x.shape(), x.dtype());
  const auto& xv = x.value();
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t o = base(l);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[o + i * stride] / temperature);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(xv[o + i * stride] / temperature - mx);
      out[o + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[o + i * stride] /= z;
  }
  // Keep the unrounded probabilities for the backward rule.
  Tensor y = out;
  return make_result("softmax", std::move(out), {x},
                     [lines, len, stride, base, temperature, y = std::move(y)](Node& self) {
                       double* g = parent(self, 0).grad_buffer().data();
                       for (std::size_t l = 0; l < lines; ++l) {
                         const std::size_t o = base(l);
                         double s = 0.0;
                         for (std::size_t i = 0; i < len; ++i)
                           s += self.grad[o + i * stride] * y[o + i * stride];
                         for (std::size_t i = 0; i < len; ++i) {
                           const std::size_t idx = o + i * stride;
                           g[idx] += y[idx] * (self.grad[idx] - s) / temperature;
                         }
                       }
                     });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(n) + " rows");
  require(n > 0, "cross_entropy: empty batch");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw std::out_of_range("cross_entropy: class index " + std::to_string(t) +
                              " outside [0, " + std::to_string(c) + ")");
    }
  }
  std::vector<double> probs(n * c);
  std::vector<int> tgt(targets.begin(), targets.end());
  double loss = 0.0;
  const auto& z = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(z[i * c + j] - lse);
    loss += lse - z[i * c + static_cast<std::size_t>(tgt[i])];
  }
  loss /= static_cast<double>(n);
  return make_result("cross_entropy", Tensor::scalar(loss, logits.dtype()), {logits},
                     [n, c, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       double* g = parent(self, 0).grad_buffer().data();
                       const double scale_ = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = static_cast<int>(j) == tgt[i] ? 1.0 : 0.0;
                           g[i * c + j] += scale_ * (probs[i * c + j] - onehot);
                         }
                     });
}

Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t padding,
           std::size_t groups) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  require(groups >= 1 && stride >= 1, "conv2d: groups and stride must be >= 1");
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  require(g.in_channels % groups == 0 && g.out_channels % groups == 0,
          "conv2d: channels not divisible by groups");
  require(w.dim(1) == g.in_channels / groups,
          "conv2d: weight " + shape_string(w.shape()) + " does not match input " +
              shape_string(x.shape()) + " with groups " + std::to_string(groups));
  require(g.in_h + 2 * padding >= g.kernel && g.in_w + 2 * padding >= g.kernel,
          "conv2d: kernel larger than padded input");
  Tensor out({g.batch, g.out_channels, g.out_h(), g.out_w()}, promote(x.dtype(), w.dtype()));
  kernels::conv2d_forward(g, x.value().data(), w.value().data(), out.data());
  return make_result("conv2d", std::move(out), {x, w}, [g](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      std::vector<double> dx(px.value.size());
      kernels::conv2d_backward_input(g, self.grad.data(), pw.value.data(), dx.data());
      px.accumulate(dx);
    }
    if (pw.requires_grad) {
      std::vector<double> dw(pw.value.size());
      kernels::conv2d_backward_weight(g, px.value.data(), self.grad.data(), dw.data());
      pw.accumulate(dw);
    }
  });
}

Var conv_forward(const Var& x, ConvKind kind, const Var& w, std::size_t stride,
                 std::size_t padding) {
  require_rank(x, 4, "conv_forward");
  require_rank(w, 4, "conv_forward");
  const std::size_t k = conv_kernel_size(kind);
  if (w.dim(2) != k || w.dim(3) != k) {
    throw ShapeError(std::string("conv_forward: unsupported kernel size ") +
                     std::to_string(w.dim(2)) + "x" + std::to_string(w.dim(3)) + " for " +
                     to_string(kind));
  }
  const std::size_t cin = x.dim(1);
  switch (kind) {
    case ConvKind::standard3x3:
    case ConvKind::pointwise1x1:
      require(w.dim(1) == cin, std::string("conv_forward: ") + to_string(kind) +
                                   " weight expects " + std::to_string(w.dim(1)) +
                                   " input channels, got " + std::to_string(cin));
      return conv2d(x, w, stride, padding, 1);
    case ConvKind::depthwise3x3:
      require(w.dim(0) == cin && w.dim(1) == 1,
              "conv_forward: depthwise weight must be [C x 1 x 3 x 3] with C = " +
                  std::to_string(cin));
      return conv2d(x, w, stride, padding, cin);
  }
  throw ShapeError("conv_forward: unknown kind");
}

Var reshape(const Var& x, Shape shape) {
  require(shape_numel(shape) == x.size(), "reshape: cannot view " + shape_string(x.shape()) +
                                               " as " + shape_string(shape));
  return make_result("reshape", x.value().reshaped(std::move(shape)), {x}, [](Node& self) {
    parent(self, 0).accumulate(self.grad.values());
  });
}

Var flatten(const Var& x) {
  require(x.shape().size() >= 1, "flatten: rank 0");
  return reshape(x, {x.dim(0), row_width(x.shape())});
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  require(!x.shape().empty(), "gather_rows: rank 0");
  const std::size_t n = x.dim(0), w = row_width(x.shape());
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out(shape, x.dtype());
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw std::out_of_range("gather_rows: row " + std::to_string(idx[r]));
    std::copy_n(x.value().data() + idx[r] * w, w, out.data() + r * w);
  }
  return make_result("gather_rows", std::move(out), {x}, [w, idx = std::move(idx)](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < w; ++j) g[idx[r] * w + j] += self.grad[r * w + j];
  });
}

Var scatter_rows(const Var& x, std::span<const std::size_t> rows, std::size_t n) {
  require(!x.shape().empty() && x.dim(0) == rows.size(), "scatter_rows: row count mismatch");
  const std::size_t w = row_width(x.shape());
  Shape shape = x.shape();
  shape[0] = n;
  Tensor out(shape, x.dtype());
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw std::out_of_range("scatter_rows: row " + std::to_string(idx[r]));
    for (std::size_t j = 0; j < w; ++j) out[idx[r] * w + j] += x.value()[r * w + j];
  }
  return make_result("scatter_rows", std::move(out), {x}, [w, idx = std::move(idx)](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[idx[r] * w + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t w = row_width(parts[0].shape());
  std::size_t rows = 0;
  Dtype dt = parts[0].dtype();
  for (const auto& p : parts) {
    require(p.shape().size() == parts[0].shape().size() && row_width(p.shape()) == w,
            "concat_rows: trailing shape mismatch");
    rows += p.dim(0);
    dt = promote(dt, p.dtype());
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  Tensor out(shape, dt);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.size();
  }
  return make_result("concat_rows", std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                     [](Node& self) {
                       std::size_t o = 0;
                       for (auto& p : self.parents) {
                         const std::size_t n = p->value.size();
                         if (p->requires_grad)
                           p->accumulate(std::span<const double>(self.grad.data() + o, n));
                         o += n;
                       }
                     });
}

Var column(const Var& x, std::size_t j) {
  require_rank(x, 2, "column");
  const std::size_t r = x.dim(0), c = x.dim(1);
  require(j < c, "column: index out of range");
  Tensor out({r}, x.dtype());
  for (std::size_t i = 0; i < r; ++i) out[i] = x.value()[i * c + j];
  return make_result("column", std::move(out), {x}, [r, c, j](Node& self) {
    double* g = parent(self, 0).grad_buffer().data();
    for (std::size_t i = 0; i < r; ++i) g[i * c + j] += self.grad[i];
  });
}

Var scale_rows(const Var& x, const Var& w) {
  require(!x.shape().empty() && w.size() == x.dim(0), "scale_rows: weight count mismatch");
  const std::size_t n = x.dim(0), rw = row_width(x.shape());
  Tensor out(x.shape(), promote(x.dtype(), w.dtype()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < rw; ++j) out[i * rw + j] = x.value()[i * rw + j] * w.value()[i];
  return make_result("scale_rows", std::move(out), {x, w}, [n, rw](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      double* g = px.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < rw; ++j) g[i * rw + j] += self.grad[i * rw + j] * pw.value[i];
    }
    if (pw.requires_grad) {
      double* g = pw.grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < rw; ++j) g[i] += self.grad[i * rw + j] * px.value[i * rw + j];
    }
  });
}

Var cosine_similarity(const Var& a, const Var& b, double eps) {
  require_rank(a, 2, "cosine_similarity");
  require_rank(b, 2, "cosine_similarity");
  const std::size_t n = a.dim(0), e = b.dim(0), d = a.dim(1);
  require(b.dim(1) == d, "cosine_similarity: feature width mismatch");
  auto norms = [d](const Tensor& t, std::size_t rows, const char* which, double floor) {
    std::vector<double> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += t[i * d + j] * t[i * d + j];
      out[i] = std::sqrt(s);
      if (out[i] == 0.0 && floor <= 0.0) {
        throw DegenerateInputError(std::string("cosine_similarity: zero-norm ") + which +
                                   " row " + std::to_string(i) + " with eps disabled");
      }
    }
    return out;
  };
  std::vector<double> na = norms(a.value(), n, "input", eps);
  std::vector<double> nb = norms(b.value(), e, "key", eps);
  Tensor raw({n, e}, Dtype::f64);
  kernels::gemm({n, e, d, false, true, false}, a.value().data(), b.value().data(), raw.data());
  Tensor out({n, e}, promote(a.dtype(), b.dtype()));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < e; ++j)
      out[i * e + j] = raw[i * e + j] / (std::max(na[i], eps) * std::max(nb[j], eps));
  return make_result(
      "cosine_similarity", std::move(out), {a, b},
      [n, e, d, eps, na = std::move(na), nb = std::move(nb), raw = std::move(raw)](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        // c = raw / (Na Nb), Na = max(|a|, eps). dNa/da = a/|a| when unclamped.
        if (pa.requires_grad) {
          double* g = pa.grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) {
            const double nai = std::max(na[i], eps);
            const bool clamped = na[i] < eps;
            for (std::size_t j = 0; j < e; ++j) {
              const double gij = self.grad[i * e + j];
              if (gij == 0.0) continue;
              const double nbj = std::max(nb[j], eps);
              const double c = raw[i * e + j] / (nai * nbj);
              for (std::size_t t = 0; t < d; ++t) {
                double dc = pb.value[j * d + t] / (nai * nbj);
                if (!clamped) dc -= c * pa.value[i * d + t] / (nai * nai);
                g[i * d + t] += gij * dc;
              }
            }
          }
        }
        if (pb.requires_grad) {
          double* g = pb.grad_buffer().data();
          for (std::size_t j = 0; j < e; ++j) {
            const double nbj = std::max(nb[j], eps);
            const bool clamped = nb[j] < eps;
            for (std::size_t i = 0; i < n; ++i) {
              const double gij = self.grad[i * e + j];
              if (gij == 0.0) continue;
              const double nai = std::max(na[i], eps);
              const double c = raw[i * e + j] / (nai * nbj);
              for (std::size_t t = 0; t < d; ++t) {
                double dc = pa.value[i * d + t] / (nai * nbj);
                if (!clamped) dc -= c * pb.value[j * d + t] / (nbj * nbj);
                g[j * d + t] += gij * dc;
              }
            }
          }
        }
      });
}

Var masked_renormalize(const Var& p, std::span<const std::uint8_t> mask) {
  require_rank(p, 2, "masked_renormalize");
  const std::size_t n = p.dim(0), e = p.dim(1);
  require(mask.size() == n * e, "masked_renormalize: mask size mismatch");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  std::vector<double> denom(n, 0.0);
  Tensor out(p.shape(), p.dtype());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < e; ++j)
      if (m[i * e + j]) denom[i] += p.value()[i * e + j];
    std::size_t count = 0;
    for (std::size_t j = 0; j < e; ++j) count += m[i * e + j] ? 1 : 0;
    if (count == 0) {
      throw DegenerateInputError("masked_renormalize: row " + std::to_string(i) +
                                 " has no assigned entries");
    }
    for (std::size_t j = 0; j < e; ++j) {
      if (!m[i * e + j]) continue;
      // Underflowed rows fall back to equal weights with no gradient.
      out[i * e + j] = denom[i] > 0.0 ? p.value()[i * e + j] / denom[i]
                                      : 1.0 / static_cast<double>(count);
    }
  }
  Tensor c = out;
  return make_result("masked_renormalize", std::move(out), {p},
                     [n, e, m = std::move(m), denom = std::move(denom), c = std::move(c)](Node& self) {
                       double* g = parent(self, 0).grad_buffer().data();
                       for (std::size_t i = 0; i < n; ++i) {
                         if (!(denom[i] > 0.0)) continue;
                         double s = 0.0;
                         for (std::size_t j = 0; j < e; ++j) s += c[i * e + j] * self.grad[i * e + j];
                         for (std::size_t j = 0; j < e; ++j)
                           if (m[i * e + j]) g[i * e + j] += (self.grad[i * e + j] - s) / denom[i];
                       }
                     });
}

Var masked_softmax(const Var& s, std::span<const std::uint8_t> mask) {
  require_rank(s, 2, "masked_softmax");
  const std::size_t n = s.dim(0), e = s.dim(1);
  require(mask.size() == n * e, "masked_softmax: mask size mismatch");
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  Tensor out(s.shape(), s.dtype());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < e; ++j)
      if (m[i * e + j]) mx = std::max(mx, s.value()[i * e + j]);
    if (!std::isfinite(mx)) {
      throw DegenerateInputError("masked_softmax: row " + std::to_string(i) + " has no entries");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      if (!m[i * e + j]) continue;
      out[i * e + j] = std::exp(s.value()[i * e + j] - mx);
      z += out[i * e + j];
    }
    for (std::size_t j = 0; j < e; ++j) out[i * e + j] /= z;
  }
  Tensor y = out;
  return make_result("masked_softmax", std::move(out), {s},
                     [n, e, m = std::move(m), y = std::move(y)](Node& self) {
                       double* g = parent(self, 0).grad_buffer().data();
                       for (std::size_t i = 0; i < n; ++i) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < e; ++j) acc += y[i * e + j] * self.grad[i * e + j];
                         for (std::size_t j = 0; j < e; ++j)
                           if (m[i * e + j]) g[i * e + j] += y[i * e + j] * (self.grad[i * e + j] - acc);
                       }
                     });
}

}  // namespace smoe
