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

// Synthetic impression -> click -> conversion funnel with known ground truth.
//
// Each impression carries standard-normal dense features and uniformly drawn
// categorical indices. The true click and conversion-given-click logits are
// linear in the dense features plus a per-index categorical offset; the two
// weight sets are correlated so the click task carries signal about the
// conversion task. Conversion labels exist only for clicked impressions.

#ifndef ESMM_FUNNEL_DATA_HPP_
#define ESMM_FUNNEL_DATA_HPP_

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace esmm {

// Knobs from which a FunnelConfig is synthesized.
struct FunnelSpec {
  int dense_dim = 16;
  int n_categorical = 2;
  int vocab_size = 2000;
  // Standard deviation of the dense part of each true logit.
  double click_signal = 1.0;
  double conv_signal = 1.0;
  // Standard deviation of each categorical offset.
  double categorical_signal = 1.5;
  // Correlation between click and conversion generative weights.
  double correlation = 0.9;
  double base_click_rate_target = 0.05;
  double base_conv_rate_target = 0.10;
  double drift_rate = 0.0;
  int n_days = 11;
  std::uint64_t seed = 20200701;
  // Sample size for the intercept bisection.
  int calibration_sample = 200000;
};

struct FunnelConfig {
  int dense_dim = 0;
  int n_categorical = 0;
  int vocab_size = 1;
  Eigen::VectorXd click_weights;
  double click_intercept = 0.0;
  Eigen::VectorXd conv_weights;
  double conv_intercept = 0.0;
  // n_categorical x vocab_size offsets added to each logit.
  Eigen::MatrixXd click_offsets;
  Eigen::MatrixXd conv_offsets;
  double drift_rate = 0.0;
  int n_days = 1;
  double base_click_rate_target = 0.05;
  double base_conv_rate_target = 0.10;
  std::uint64_t drift_seed = 0;

  void validate() const;
  std::string fingerprint() const;
};

// Draws generative weights from `spec` and solves both intercepts by
// bisection so the realized base rates hit the targets.
FunnelConfig synthesize_funnel(const FunnelSpec& spec);

struct Example {
  Eigen::VectorXd dense;
  std::vector<int> categorical;
  int click = 0;       // y
  int conversion = 0;  // z, only ever 1 when click == 1
  double weight = 1.0;
  int day = 0;
};

struct Provenance {
  std::string config_fingerprint;
  std::uint64_t seed = 0;
  double downsample_factor = 1.0;
};

struct Dataset {
  std::vector<Example> examples;
  Provenance provenance;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  // Hash of every example; equal datasets have equal fingerprints.
  std::string fingerprint() const;
};

// Pure functions of (config, x, day): the generative probabilities.
class GroundTruth {
 public:
  explicit GroundTruth(FunnelConfig config);

  const FunnelConfig& config() const { return config_; }
  const std::string& fingerprint() const { return fingerprint_; }

  double click_logit(const Eigen::VectorXd& dense, std::span<const int> categorical, int day) const;
  double conv_logit(const Eigen::VectorXd& dense, std::span<const int> categorical, int day) const;

 private:
  struct DayParams {
    Eigen::VectorXd click_weights;
    Eigen::VectorXd conv_weights;
    Eigen::MatrixXd click_offsets;
    Eigen::MatrixXd conv_offsets;
  };
  const DayParams& day_params(int day) const;
  void check_features(const Eigen::VectorXd& dense, std::span<const int> categorical) const;

  FunnelConfig config_;
  std::string fingerprint_;
  std::vector<DayParams> days_;
};

double true_ctr(const GroundTruth& gt, const Eigen::VectorXd& dense, std::span<const int> categorical,
                int day);
double true_cvr_given_click(const GroundTruth& gt, const Eigen::VectorXd& dense,
                            std::span<const int> categorical, int day);
double true_joint(const GroundTruth& gt, const Eigen::VectorXd& dense, std::span<const int> categorical,
                  int day);

inline double true_ctr(const GroundTruth& gt, const Example& x) {
  return true_ctr(gt, x.dense, x.categorical, x.day);
}
inline double true_cvr_given_click(const GroundTruth& gt, const Example& x) {
  return true_cvr_given_click(gt, x.dense, x.categorical, x.day);
}
inline double true_joint(const GroundTruth& gt, const Example& x) {
  return true_joint(gt, x.dense, x.categorical, x.day);
}

// n impressions for one day, all with weight 1.
Dataset generate_day(const GroundTruth& gt, int day, std::size_t n, std::uint64_t seed);

// Days [first_day, first_day + n_days), n_per_day each, concatenated in day order.
Dataset generate_days(const GroundTruth& gt, int first_day, int n_days, std::size_t n_per_day,
                      std::uint64_t seed);

// Keeps every clicked example; keeps each unclicked one with probability 1/f
// and multiplies its weight by f. Never looks at the conversion label.
Dataset downsample_negatives(const Dataset& ds, double factor, std::uint64_t seed);

Dataset shuffle(const Dataset& ds, std::uint64_t seed);

// Clicked examples only, in input order.
Dataset clicked_subset(const Dataset& ds);

enum class Target { kJoint, kCtr, kCvrGivenClick };

// Weighted cross-entropy of the true probabilities against realized labels:
// the irreducible loss for `target` on `ds`.
double bayes_ce(const GroundTruth& gt, const Dataset& ds, Target target);

// Columnar text: a `# ...` provenance line, a header row, one example per line.
void write_dataset(const Dataset& ds, std::ostream& out);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace esmm

#endif  // ESMM_FUNNEL_DATA_HPP_
