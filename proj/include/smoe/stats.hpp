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

// Paired-gap statistics and the Student-t distribution.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace smoe {

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double dof);
// Inverse CDF for p in (0, 1).
double student_t_quantile(double p, double dof);

struct AggregateStats {
  std::size_t n = 0;
  double mean_gap = 0.0;
  double sd_gap = 0.0;  // n - 1 denominator
  // +-inf when sd_gap is 0 and mean_gap is nonzero; 0 when both are 0.
  double t_statistic = 0.0;
  double cohens_d = 0.0;
  double ci95_low = 0.0, ci95_high = 0.0;
  double p_value = 1.0;  // two-sided
  bool all_seeds_positive = false;
  std::vector<std::string> source_files;
};

// Throws std::invalid_argument for fewer than two gaps.
AggregateStats aggregate_gaps(std::span<const double> gaps);

}  // namespace smoe
