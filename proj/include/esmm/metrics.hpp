/*
 * Copyright 2026 The esmm-lab Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef ESMM_METRICS_HPP_
#define ESMM_METRICS_HPP_

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace esmm {

// sum(w * CE(p, z)) / sum(w), predictions clamped into [eps, 1 - eps].
double weighted_ce(std::span<const double> preds, std::span<const int> labels,
                   std::span<const double> weights);

// Weighted average precision. Ranks by descending prediction, equal
// predictions keep input order, and averages the weighted precision at each
// positive, weighting each positive by its own weight.
double pr_auc(std::span<const double> preds, std::span<const int> labels,
              std::span<const double> weights);

// sum(w * pred) / sum(w * label).
double calibration_ratio(std::span<const double> preds, std::span<const int> labels,
                         std::span<const double> weights);

double mean(std::span<const double> xs);
// Unbiased (n - 1) sample variance.
double sample_variance(std::span<const double> xs);
double standard_error(std::span<const double> xs);

// Per-seed score = mean(baseline CE) / model CE, so lower CE scores above 1.
struct NormalizedPerformance {
  double mean = 0.0;
  double sem = 0.0;
  std::vector<double> scores;
};

NormalizedPerformance normalized_performance(std::span<const double> model_ces,
                                             std::span<const double> baseline_ces);

// Two-sided p-value of Welch's unequal-variance t-test.
double two_sided_t_test(std::span<const double> a, std::span<const double> b);

// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
double student_t_two_sided(double t, double df);

// I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

struct MetricsRecord {
  double joint_ce = 0.0;
  double joint_pr_auc = 0.0;
  double calibration_ratio = 0.0;
  std::optional<double> ctr_ce;
  // calibration_ratio of the CTR head against click labels.
  std::optional<double> ctr_calibration_ratio;
  // Fraction of examples with joint > ctr; defined when a CTR head exists.
  std::optional<double> consistency_violation_rate;
};

struct ComparisonStats {
  std::vector<std::string> models;
  std::vector<double> mean_norm_perf;
  std::vector<double> sem;
  std::vector<std::vector<double>> scores;  // per model, per seed
  Eigen::MatrixXd p_values;                 // symmetric, ones on the diagonal
  // better_than[i] lists models j with p < alpha and mean_i > mean_j.
  std::vector<std::vector<std::string>> better_than;
};

inline constexpr double kSignificanceLevel = 0.01;

// `ces[i]` holds per-seed CE for `models[i]`; `baseline` must be one of them.
ComparisonStats compare_models(const std::vector<std::string>& models,
                               const std::vector<std::vector<double>>& ces,
                               const std::string& baseline, double alpha = kSignificanceLevel);

}  // namespace esmm

#endif  // ESMM_METRICS_HPP_
