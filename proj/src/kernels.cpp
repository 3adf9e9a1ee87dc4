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

#include "smoe/kernels.hpp"

#include <atomic>
#include <cstdint>

namespace smoe::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};

// One row of C. Shared by both backends so the accumulation order matches.
inline void gemm_row(const GemmArgs& g, const double* a, const double* b, double* c,
                     std::size_t i) {
  double* crow = c + i * g.n;
  if (!g.accumulate) {
    for (std::size_t j = 0; j < g.n; ++j) crow[j] = 0.0;
  }
  if (g.trans_b) {
    for (std::size_t j = 0; j < g.n; ++j) {
      const double* brow = b + j * g.k;
      double acc = 0.0;
      for (std::size_t p = 0; p < g.k; ++p) {
        const double aip = g.trans_a ? a[p * g.m + i] : a[i * g.k + p];
        acc += aip * brow[p];
      }
      crow[j] += acc;
    }
    return;
  }
  for (std::size_t p = 0; p < g.k; ++p) {
    const double aip = g.trans_a ? a[p * g.m + i] : a[i * g.k + p];
    if (aip == 0.0) continue;
    const double* brow = b + p * g.n;
    for (std::size_t j = 0; j < g.n; ++j) crow[j] += aip * brow[j];
  }
}

// Output plane (b, oc).
inline void conv_forward_plane(const ConvGeometry& g, const double* x, const double* w, double* y,
                               std::size_t b, std::size_t oc) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  const std::size_t icg = g.in_per_group();
  const std::size_t group = oc / g.out_per_group();
  double* yp = y + (b * g.out_channels + oc) * oh * ow;
  for (std::size_t i = 0; i < oh * ow; ++i) yp[i] = 0.0;
  for (std::size_t icl = 0; icl < icg; ++icl) {
    const std::size_t ic = group * icg + icl;
    const double* xp = x + (b * g.in_channels + ic) * g.in_h * g.in_w;
    const double* wp = w + (oc * icg + icl) * kk * kk;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < kk; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < kk; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            acc += xp[iy * g.in_w + ix] * wp[ky * kk + kx];
          }
        }
        yp[oy * ow + ox] += acc;
      }
    }
  }
}

// Input-gradient plane (b, ic).
inline void conv_backward_input_plane(const ConvGeometry& g, const double* dy, const double* w,
                                      double* dx, std::size_t b, std::size_t ic) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t group = ic / icg, icl = ic % icg;
  double* dxp = dx + (b * g.in_channels + ic) * g.in_h * g.in_w;
  for (std::size_t i = 0; i < g.in_h * g.in_w; ++i) dxp[i] = 0.0;
  for (std::size_t ocl = 0; ocl < ocg; ++ocl) {
    const std::size_t oc = group * ocg + ocl;
    const double* dyp = dy + (b * g.out_channels + oc) * oh * ow;
    const double* wp = w + (oc * icg + icl) * kk * kk;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double gy = dyp[oy * ow + ox];
        if (gy == 0.0) continue;
        for (std::size_t ky = 0; ky < kk; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < kk; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            dxp[iy * g.in_w + ix] += gy * wp[ky * kk + kx];
          }
        }
      }
    }
  }
}

// Weight-gradient slice for output channel oc, accumulated over the batch in order.
inline void conv_backward_weight_slice(const ConvGeometry& g, const double* x, const double* dy,
                                       double* dw, std::size_t oc) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), kk = g.kernel;
  const std::size_t icg = g.in_per_group();
  const std::size_t group = oc / g.out_per_group();
  double* dwp = dw + oc * icg * kk * kk;
  for (std::size_t i = 0; i < icg * kk * kk; ++i) dwp[i] = 0.0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* dyp = dy + (b * g.out_channels + oc) * oh * ow;
    for (std::size_t icl = 0; icl < icg; ++icl) {
      const std::size_t ic = group * icg + icl;
      const double* xp = x + (b * g.in_channels + ic) * g.in_h * g.in_w;
      double* wslice = dwp + icl * kk * kk;
      for (std::size_t ky = 0; ky < kk; ++ky) {
        for (std::size_t kx = 0; kx < kk; ++kx) {
          double acc = 0.0;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              acc += xp[iy * g.in_w + ix] * dyp[oy * ow + ox];
            }
          }
          wslice[ky * kk + kx] += acc;
        }
      }
    }
  }
}

}  // namespace

Backend default_backend() { return g_backend.load(std::memory_order_relaxed); }
void set_default_backend(Backend backend) { g_backend.store(backend, std::memory_order_relaxed); }

namespace serial {

void gemm(const GemmArgs& g, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < g.m; ++i) gemm_row(g, a, b, c, i);
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) conv_forward_plane(g, x, w, y, b, oc);
}

void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t ic = 0; ic < g.in_channels; ++ic)
      conv_backward_input_plane(g, dy, w, dx, b, ic);
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw) {
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) conv_backward_weight_slice(g, x, dy, dw, oc);
}

}  // namespace serial

namespace parallel {

void gemm(const GemmArgs& g, const double* a, const double* b, double* c) {
  const auto m = static_cast<std::int64_t>(g.m);
#pragma omp parallel for schedule(static) if (g.m * g.n * g.k > 32768)
  for (std::int64_t i = 0; i < m; ++i) gemm_row(g, a, b, c, static_cast<std::size_t>(i));
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
  const auto planes = static_cast<std::int64_t>(g.batch * g.out_channels);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const auto up = static_cast<std::size_t>(p);
    conv_forward_plane(g, x, w, y, up / g.out_channels, up % g.out_channels);
  }
}

void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx) {
  const auto planes = static_cast<std::int64_t>(g.batch * g.in_channels);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const auto up = static_cast<std::size_t>(p);
    conv_backward_input_plane(g, dy, w, dx, up / g.in_channels, up % g.in_channels);
  }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw) {
  const auto channels = static_cast<std::int64_t>(g.out_channels);
#pragma omp parallel for schedule(static)
  for (std::int64_t oc = 0; oc < channels; ++oc)
    conv_backward_weight_slice(g, x, dy, dw, static_cast<std::size_t>(oc));
}

}  // namespace parallel

void gemm(const GemmArgs& g, const double* a, const double* b, double* c) {
  if (default_backend() == Backend::parallel) {
    parallel::gemm(g, a, b, c);
  } else {
    serial::gemm(g, a, b, c);
  }
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
  if (default_backend() == Backend::parallel) {
    parallel::conv2d_forward(g, x, w, y);
  } else {
    serial::conv2d_forward(g, x, w, y);
  }
}

void conv2d_backward_input(const ConvGeometry& g, const double* dy, const double* w, double* dx) {
  if (default_backend() == Backend::parallel) {
    parallel::conv2d_backward_input(g, dy, w, dx);
  } else {
    serial::conv2d_backward_input(g, dy, w, dx);
  }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* x, const double* dy, double* dw) {
  if (default_backend() == Backend::parallel) {
    parallel::conv2d_backward_weight(g, x, dy, dw);
  } else {
    serial::conv2d_backward_weight(g, x, dy, dw);
  }
}

}  // namespace smoe::kernels
