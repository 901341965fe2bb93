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


#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "esmm/autodiff.hpp"
#include "esmm/errors.hpp"
#include "esmm/funnel_data.hpp"
#include "esmm/metrics.hpp"

using doctest::Approx;

namespace {

// One dense feature, no categorical features, hand-set weights.
esmm::FunnelConfig tiny_config(double click_w, double click_b, double conv_w, double conv_b) {
  esmm::FunnelConfig cfg;
  cfg.dense_dim = 1;
  cfg.n_categorical = 0;
  cfg.vocab_size = 1;
  cfg.click_weights = Eigen::VectorXd::Constant(1, click_w);
  cfg.click_intercept = click_b;
  cfg.conv_weights = Eigen::VectorXd::Constant(1, conv_w);
  cfg.conv_intercept = conv_b;
  cfg.click_offsets.resize(0, 1);
  cfg.conv_offsets.resize(0, 1);
  cfg.n_days = 3;
  return cfg;
}

const esmm::GroundTruth& default_truth() {
  static const esmm::GroundTruth gt(esmm::synthesize_funnel(esmm::FunnelSpec{}));
  return gt;
}

double click_rate(const esmm::Dataset& ds) {
  double clicks = 0.0;
  for (const auto& e : ds.examples) clicks += e.click;
  return clicks / double(ds.size());
}

}  // namespace

TEST_CASE("zero generative weights give 0.5 and 0.25") {
  esmm::FunnelConfig cfg = tiny_config(0, 0, 0, 0);
  const esmm::GroundTruth gt(cfg);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.7);
  CHECK(esmm::true_ctr(gt, x, {}, 0) == 0.5);
  CHECK(esmm::true_cvr_given_click(gt, x, {}, 0) == 0.5);
  CHECK(esmm::true_joint(gt, x, {}, 0) == 0.25);
}

TEST_CASE("hand-set weight reproduces the analytic sigmoid") {
  const esmm::GroundTruth gt(tiny_config(1, 0, 0, 0));
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, std::log(3.0));
  CHECK(esmm::true_ctr(gt, x, {}, 0) == Approx(0.75).epsilon(1e-15));
}

TEST_CASE("ground truth rejects mismatched features") {
  const esmm::GroundTruth& gt = default_truth();
  const Eigen::VectorXd wrong = Eigen::VectorXd::Zero(3);
  const std::vector<int> cats{0, 0};
  CHECK_THROWS_AS(esmm::true_ctr(gt, wrong, cats, 0), esmm::ContractViolation);
}

TEST_CASE("joint equals the product and never exceeds either factor") {
  const esmm::GroundTruth& gt = default_truth();
  const esmm::Dataset ds = esmm::generate_day(gt, 0, 5000, 1);
  for (const auto& e : ds.examples) {
    const double ctr = esmm::true_ctr(gt, e), cvr = esmm::true_cvr_given_click(gt, e);
    const double joint = esmm::true_joint(gt, e);
    CHECK(joint == ctr * cvr);
    CHECK(joint <= std::min(ctr, cvr));
  }
}

TEST_CASE("realized base rates match the targets") {
  const esmm::GroundTruth& gt = default_truth();
  const std::size_t n = 1000000;
  const esmm::Dataset ds = esmm::generate_day(gt, 0, n, 2);
  const double p = gt.config().base_click_rate_target;
  const double se = std::sqrt(p * (1 - p) / double(n));
  CHECK(std::abs(click_rate(ds) - p) < 3 * se);

  double clicks = 0.0, convs = 0.0;
  for (const auto& e : ds.examples) {
    clicks += e.click;
    convs += e.conversion;
  }
  const double cvr = convs / clicks;
  CHECK(std::abs(cvr - gt.config().base_conv_rate_target) < 0.1 * gt.config().base_conv_rate_target);
}

TEST_CASE("generated examples respect the funnel") {
  const esmm::GroundTruth& gt = default_truth();
  const esmm::Dataset ds = esmm::generate_day(gt, 1, 200000, 3);
  for (const auto& e : ds.examples) {
    if (e.conversion == 1) CHECK(e.click == 1);
    CHECK(e.weight == 1.0);
    CHECK(e.day == 1);
    CHECK(e.dense.size() == 16);
    CHECK(e.categorical.size() == 2);
  }
}

TEST_CASE("generation is deterministic and handles edge sizes") {
  const esmm::GroundTruth& gt = default_truth();
  CHECK(esmm::generate_day(gt, 0, 1000, 9).fingerprint() == esmm::generate_day(gt, 0, 1000, 9).fingerprint());
  CHECK(esmm::generate_day(gt, 0, 1000, 9).fingerprint() != esmm::generate_day(gt, 0, 1000, 10).fingerprint());
  CHECK(esmm::generate_day(gt, 0, 0, 9).empty());
  CHECK_THROWS_AS(esmm::generate_day(gt, gt.config().n_days, 10, 9), esmm::ContractViolation);
  CHECK_THROWS_AS(esmm::generate_day(gt, -1, 10, 9), esmm::ContractViolation);
}

TEST_CASE("without drift every day shares the same distribution") {
  const esmm::GroundTruth& gt = default_truth();
  const esmm::Dataset probe = esmm::generate_day(gt, 0, 200, 4);
  for (const auto& e : probe.examples) {
    for (int day = 1; day < gt.config().n_days; ++day) {
      CHECK(esmm::true_ctr(gt, e.dense, e.categorical, day) == esmm::true_ctr(gt, e));
      CHECK(esmm::true_cvr_given_click(gt, e.dense, e.categorical, day) == esmm::true_cvr_given_click(gt, e));
    }
  }
  const std::size_t n = 200000;
  std::vector<double> rates;
  for (int day = 0; day < gt.config().n_days; ++day) {
    rates.push_back(click_rate(esmm::generate_day(gt, day, n, 40 + day)));
  }
  const double p = gt.config().base_click_rate_target;
  const double combined = std::sqrt(2 * p * (1 - p) / double(n));
  for (double a : rates) {
    for (double b : rates) CHECK(std::abs(a - b) < 3 * combined);
  }
}

TEST_CASE("drift moves the generative weights") {
  esmm::FunnelSpec spec;
  spec.drift_rate = 0.1;
  spec.calibration_sample = 20000;
  const esmm::GroundTruth gt(esmm::synthesize_funnel(spec));
  const esmm::Dataset probe = esmm::generate_day(gt, 0, 50, 4);
  int changed = 0;
  for (const auto& e : probe.examples) {
    changed += esmm::true_ctr(gt, e.dense, e.categorical, 5) != esmm::true_ctr(gt, e);
  }
  CHECK(changed == 50);
}

TEST_CASE("downsampling with f = 1 is the identity") {
  const esmm::Dataset ds = esmm::generate_day(default_truth(), 0, 5000, 5);
  const esmm::Dataset same = esmm::downsample_negatives(ds, 1.0, 1);
  REQUIRE(same.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(same.examples[i].weight == ds.examples[i].weight);
    CHECK(same.examples[i].click == ds.examples[i].click);
  }
}

TEST_CASE("downsampling keeps 1/f of the negatives with weight f") {
  const esmm::GroundTruth gt(tiny_config(0, -40, 0, 0));  // essentially no clicks
  const esmm::Dataset ds = esmm::generate_day(gt, 0, 1000000, 6);
  std::size_t negatives = 0;
  for (const auto& e : ds.examples) negatives += e.click == 0;
  REQUIRE(negatives == ds.size());
  const esmm::Dataset down = esmm::downsample_negatives(ds, 10.0, 7);
  const double expected = 1e5;
  const double se = std::sqrt(1e6 * 0.1 * 0.9);
  CHECK(std::abs(double(down.size()) - expected) < 3 * se);
  for (const auto& e : down.examples) CHECK(e.weight == 10.0);
  CHECK(down.provenance.downsample_factor == 10.0);
  CHECK_THROWS_AS(esmm::downsample_negatives(ds, 0.5, 7), esmm::ContractViolation);
}

TEST_CASE("downsampling keeps every positive untouched") {
  const esmm::GroundTruth gt(tiny_config(0, 40, 0, 0));  // everything clicks
  const esmm::Dataset ds = esmm::generate_day(gt, 0, 2000, 8);
  const esmm::Dataset down = esmm::downsample_negatives(ds, 25.0, 9);
  REQUIRE(down.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(down.examples[i].weight == 1.0);
    CHECK(down.examples[i].conversion == ds.examples[i].conversion);
  }
}

TEST_CASE("downsampling never consults the conversion label") {
  esmm::Dataset ds = esmm::generate_day(default_truth(), 0, 20000, 10);
  esmm::Dataset flipped = ds;
  for (auto& e : flipped.examples) {
    if (e.click == 1) e.conversion = 1 - e.conversion;
  }
  const esmm::Dataset a = esmm::downsample_negatives(ds, 10.0, 3);
  const esmm::Dataset b = esmm::downsample_negatives(flipped, 10.0, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.examples[i].dense == b.examples[i].dense);
    CHECK(a.examples[i].weight == b.examples[i].weight);
  }
}

TEST_CASE("upweighted negative count is unbiased") {
  const esmm::Dataset ds = esmm::generate_day(default_truth(), 0, 100000, 11);
  double original = 0.0;
  for (const auto& e : ds.examples) original += e.click == 0;
  double total = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const esmm::Dataset down = esmm::downsample_negatives(ds, 10.0, 1000 + trial);
    for (const auto& e : down.examples) {
      if (e.click == 0) total += e.weight;
    }
  }
  CHECK(std::abs(total / 100.0 - original) / original < 0.01);
}

TEST_CASE("weighted CE on a downsampled set estimates the full-space CE") {
  const esmm::GroundTruth& gt = default_truth();
  const esmm::Dataset full = esmm::generate_day(gt, 0, 400000, 12);
  const esmm::Dataset down = esmm::downsample_negatives(full, 10.0, 13);
  // A fixed, deliberately imperfect predictor.
  auto loss_stats = [&](const esmm::Dataset& ds, double& ce, double& se) {
    std::vector<double> p, w, l;
    std::vector<int> y;
    for (const auto& e : ds.examples) {
      const double q = std::min(0.5, 1.5 * esmm::true_ctr(gt, e));
      p.push_back(q);
      y.push_back(e.click);
      w.push_back(e.weight);
      l.push_back(esmm::weighted_bce(q, e.click, 1.0));
    }
    ce = esmm::weighted_ce(p, y, w);
    double wsum = 0.0, var = 0.0;
    for (double x : w) wsum += x;
    for (std::size_t i = 0; i < l.size(); ++i) var += w[i] * w[i] * (l[i] - ce) * (l[i] - ce);
    se = std::sqrt(var) / wsum;
  };
  double ce_full = 0, se_full = 0, ce_down = 0, se_down = 0;
  loss_stats(full, ce_full, se_full);
  loss_stats(down, ce_down, se_down);
  CHECK(std::abs(ce_full - ce_down) < 3 * std::sqrt(se_full * se_full + se_down * se_down));
}

TEST_CASE("bayes_ce of a deterministic funnel is near zero") {
  const esmm::GroundTruth gt(tiny_config(1e6, 0, 1e6, 0));
  const esmm::Dataset ds = esmm::generate_day(gt, 0, 20000, 14);
  CHECK(esmm::bayes_ce(gt, ds, esmm::Target::kCtr) < 1e-3);
  CHECK(esmm::bayes_ce(gt, ds, esmm::Target::kJoint) < 1e-3);
  CHECK(esmm::bayes_ce(gt, ds, esmm::Target::kCvrGivenClick) < 1e-3);
}

TEST_CASE("bayes_ce of a constant rate is the binary entropy") {
  const double p = 0.2;
  const esmm::GroundTruth gt(tiny_config(0, std::log(p / (1 - p)), 0, 0));
  const std::size_t n = 200000;
  const esmm::Dataset ds = esmm::generate_day(gt, 0, n, 15);
  const double entropy = -(p * std::log(p) + (1 - p) * std::log(1 - p));
  // Per-example loss takes -ln p or -ln(1-p); its variance is p(1-p) ln^2(p/(1-p)).
  const double se = std::sqrt(p * (1 - p)) * std::abs(std::log(p / (1 - p))) / std::sqrt(double(n));
  CHECK(std::abs(esmm::bayes_ce(gt, ds, esmm::Target::kCtr) - entropy) < 3 * se);
}

TEST_CASE("bayes_ce rejects a dataset from another funnel") {
  const esmm::GroundTruth a(tiny_config(1, 0, 0, 0));
  const esmm::GroundTruth b(tiny_config(2, 0, 0, 0));
  const esmm::Dataset ds = esmm::generate_day(a, 0, 10, 1);
  CHECK_THROWS_AS(esmm::bayes_ce(b, ds, esmm::Target::kJoint), esmm::ContractViolation);
}

TEST_CASE("shuffle is a seeded permutation") {
  const esmm::GroundTruth& gt = default_truth();
  esmm::Dataset one = esmm::generate_day(gt, 0, 1, 1);
  CHECK(esmm::shuffle(one, 5).fingerprint() == one.fingerprint());

  const esmm::Dataset ds = esmm::generate_day(gt, 0, 3000, 2);
  const esmm::Dataset a = esmm::shuffle(ds, 5), b = esmm::shuffle(ds, 5);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != ds.fingerprint());
  std::map<double, int> before, after;
  for (const auto& e : ds.examples) ++before[e.dense(0)];
  for (const auto& e : a.examples) ++after[e.dense(0)];
  CHECK(before == after);
}

TEST_CASE("shuffle breaks label runs") {
  esmm::Dataset ds = esmm::generate_day(default_truth(), 0, 20000, 3);
  std::stable_sort(ds.examples.begin(), ds.examples.end(),
                   [](const esmm::Example& a, const esmm::Example& b) { return a.click < b.click; });
  const esmm::Dataset s = esmm::shuffle(ds, 17);
  double n1 = 0;
  for (const auto& e : s.examples) n1 += e.click;
  const double n = double(s.size()), n0 = n - n1;
  int runs = 1;
  for (std::size_t i = 1; i < s.size(); ++i) runs += s.examples[i].click != s.examples[i - 1].click;
  // Wald-Wolfowitz: mean and variance of the run count under a random permutation.
  const double mu = 1 + 2 * n0 * n1 / n;
  const double var = 2 * n0 * n1 * (2 * n0 * n1 - n) / (n * n * (n - 1));
  CHECK(std::abs(runs - mu) < 3 * std::sqrt(var));
}

TEST_CASE("clicked_subset keeps only clicks in order") {
  const esmm::Dataset ds = esmm::generate_day(default_truth(), 0, 5000, 4);
  const esmm::Dataset c = esmm::clicked_subset(ds);
  std::size_t clicks = 0;
  for (const auto& e : ds.examples) clicks += e.click;
  CHECK(c.size() == clicks);
  for (const auto& e : c.examples) CHECK(e.click == 1);
}

TEST_CASE("dataset text round trip is exact") {
  const esmm::Dataset ds = esmm::downsample_negatives(esmm::generate_day(default_truth(), 2, 3000, 5), 4.0, 6);
  std::stringstream buf;
  esmm::write_dataset(ds, buf);
  const std::string text = buf.str();
  CHECK(text.rfind("# fingerprint=", 0) == 0);
  CHECK(text.find("dense_0,") != std::string::npos);
  CHECK(text.find("cat_1,click,conversion,weight,day") != std::string::npos);
  const esmm::Dataset back = esmm::read_dataset(buf);
  CHECK(back.fingerprint() == ds.fingerprint());
  CHECK(back.provenance.downsample_factor == 4.0);
}

TEST_CASE("loading a missing dataset file is an I/O error") {
  CHECK_THROWS_AS(esmm::load_dataset("/nonexistent/dir/data.csv"), esmm::IoError);
}
