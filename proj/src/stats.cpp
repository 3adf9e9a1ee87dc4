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

#include "smoe/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace smoe {

namespace {

// Continued fraction for the incomplete beta, modified Lentz.
double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("incomplete_beta: a, b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_cf(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_cdf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
  return t >= 0.0 ? 1.0 - tail : tail;
}

double student_t_quantile(double p, double dof) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("student_t_quantile: p outside (0, 1)");
  if (p == 0.5) return 0.0;
  if (p < 0.5) return -student_t_quantile(1.0 - p, dof);
  double lo = 0.0, hi = 1.0;
  while (student_t_cdf(hi, dof) < p) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, dof) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

AggregateStats aggregate_gaps(std::span<const double> gaps) {
  if (gaps.size() < 2) throw std::invalid_argument("aggregate: need at least two runs");
  AggregateStats s;
  s.n = gaps.size();
  const double n = static_cast<double>(s.n);
  double sum = 0.0;
  s.all_seeds_positive = true;
  for (double g : gaps) {
    sum += g;
    if (!(g > 0.0)) s.all_seeds_positive = false;
  }
  s.mean_gap = sum / n;
  double ss = 0.0;
  for (double g : gaps) ss += (g - s.mean_gap) * (g - s.mean_gap);
  s.sd_gap = std::sqrt(ss / (n - 1.0));

  const double se = s.sd_gap / std::sqrt(n);
  if (s.sd_gap > 0.0) {
    s.t_statistic = s.mean_gap / se;
    s.cohens_d = s.mean_gap / s.sd_gap;
    s.p_value = 2.0 * (1.0 - student_t_cdf(std::abs(s.t_statistic), n - 1.0));
  } else {
    const double inf = std::numeric_limits<double>::infinity();
    s.t_statistic = s.mean_gap > 0 ? inf : s.mean_gap < 0 ? -inf : 0.0;
    s.cohens_d = s.t_statistic;
    s.p_value = s.mean_gap != 0.0 ? 0.0 : 1.0;
  }
  const double half = student_t_quantile(0.975, n - 1.0) * se;
  s.ci95_low = s.mean_gap - half;
  s.ci95_high = s.mean_gap + half;
  return s;
}

}  // namespace smoe
