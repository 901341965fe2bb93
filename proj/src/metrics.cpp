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

#include "esmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "esmm/autodiff.hpp"
#include "esmm/errors.hpp"

namespace esmm {
namespace {

void check_inputs(std::span<const double> preds, std::span<const int> labels,
                  std::span<const double> weights, const char* what) {
  const std::string op(what);
  require(!preds.empty(), op + ": empty input");
  require(preds.size() == labels.size() && preds.size() == weights.size(),
          op + ": length mismatch");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(weights[i] >= 0.0 && std::isfinite(weights[i]), op + ": weights must be finite and >= 0");
    require(labels[i] == 0 || labels[i] == 1, op + ": labels must be 0 or 1");
  }
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double weighted_ce(std::span<const double> preds, std::span<const int> labels,
                   std::span<const double> weights) {
  check_inputs(preds, labels, weights, "weighted_ce");
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    total += weighted_bce(preds[i], labels[i], weights[i]);
    wsum += weights[i];
  }
  require(wsum > 0.0, "weighted_ce: weights sum to zero");
  return total / wsum;
}

double pr_auc(std::span<const double> preds, std::span<const int> labels,
              std::span<const double> weights) {
  check_inputs(preds, labels, weights, "pr_auc");
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a] > preds[b]; });
  double seen = 0.0, seen_pos = 0.0, sum_prec = 0.0, pos_weight = 0.0, neg_weight = 0.0;
  for (std::size_t i : order) {
    seen += weights[i];
    if (labels[i] == 1) {
      seen_pos += weights[i];
      pos_weight += weights[i];
      if (weights[i] > 0.0) sum_prec += weights[i] * (seen_pos / seen);
    } else {
      neg_weight += weights[i];
    }
  }
  require(pos_weight > 0.0 && neg_weight > 0.0, "pr_auc: need both positive and negative examples");
  return sum_prec / pos_weight;
}

double calibration_ratio(std::span<const double> preds, std::span<const int> labels,
                         std::span<const double> weights) {
  check_inputs(preds, labels, weights, "calibration_ratio");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    num += weights[i] * clamp_probability(preds[i]);
    den += weights[i] * labels[i];
  }
  require(den > 0.0, "calibration_ratio: no positive weight");
  return num / den;
}

double mean(std::span<const double> xs) {
  require(!xs.empty(), "mean: empty input");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_variance(std::span<const double> xs) {
  require(xs.size() >= 2, "sample_variance: need at least 2 values");
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return ss / static_cast<double>(xs.size() - 1);
}

double standard_error(std::span<const double> xs) {
  return std::sqrt(sample_variance(xs) / static_cast<double>(xs.size()));
}

NormalizedPerformance normalized_performance(std::span<const double> model_ces,
                                             std::span<const double> baseline_ces) {
  require(model_ces.size() >= 2 && baseline_ces.size() >= 2,
          "normalized_performance: need at least 2 seeds each");
  const double base = mean(baseline_ces);
  NormalizedPerformance out;
  out.scores.reserve(model_ces.size());
  for (double ce : model_ces) {
    require(ce > 0.0, "normalized_performance: cross-entropy must be positive");
    out.scores.push_back(base / ce);
  }
  out.mean = mean(out.scores);
  out.sem = standard_error(out.scores);
  return out;
}

double regularized_incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, "incomplete beta: a and b must be positive");
  require(x >= 0.0 && x <= 1.0, "incomplete beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  require(df > 0.0, "student_t_two_sided: df must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

double two_sided_t_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, "two_sided_t_test: need at least 2 samples each");
  const double ma = mean(a), mb = mean(b);
  const double va = sample_variance(a) / static_cast<double>(a.size());
  const double vb = sample_variance(b) / static_cast<double>(b.size());
  const double se2 = va + vb;
  if (se2 == 0.0) return ma == mb ? 1.0 : 0.0;
  const double t = (ma - mb) / std::sqrt(se2);
  // Welch-Satterthwaite degrees of freedom.
  const double df = se2 * se2 /
                    (va * va / static_cast<double>(a.size() - 1) +
                     vb * vb / static_cast<double>(b.size() - 1));
  return student_t_two_sided(t, df);
}

ComparisonStats compare_models(const std::vector<std::string>& models,
                               const std::vector<std::vector<double>>& ces,
                               const std::string& baseline, double alpha) {
  require(models.size() == ces.size(), "compare_models: one CE series per model");
  const auto it = std::find(models.begin(), models.end(), baseline);
  require(it != models.end(), "compare_models: baseline " + baseline + " not among models");
  const auto& base = ces[static_cast<std::size_t>(it - models.begin())];
  ComparisonStats stats;
  stats.models = models;
  for (const auto& series : ces) {
    NormalizedPerformance np = normalized_performance(series, base);
    stats.mean_norm_perf.push_back(np.mean);
    stats.sem.push_back(np.sem);
    stats.scores.push_back(std::move(np.scores));
  }
  const auto n = static_cast<Eigen::Index>(models.size());
  stats.p_values = Eigen::MatrixXd::Ones(n, n);
  stats.better_than.resize(models.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double p = two_sided_t_test(stats.scores[i], stats.scores[j]);
      stats.p_values(i, j) = p;
      if (p < alpha && stats.mean_norm_perf[i] > stats.mean_norm_perf[j]) {
        stats.better_than[i].push_back(models[j]);
      }
    }
  }
  return stats;
}

}  // namespace esmm
