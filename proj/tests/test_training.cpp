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


#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "esmm/errors.hpp"
#include "esmm/funnel_data.hpp"
#include "esmm/metrics.hpp"
#include "esmm/models.hpp"
#include "esmm/training.hpp"

using doctest::Approx;
using esmm::Design;
using esmm::Model;

namespace {

esmm::FunnelSpec toy_spec() {
  esmm::FunnelSpec spec;
  spec.dense_dim = 4;
  spec.n_categorical = 1;
  spec.vocab_size = 10;
  spec.click_signal = 2.0;
  spec.conv_signal = 2.0;
  spec.base_click_rate_target = 0.3;
  spec.base_conv_rate_target = 0.3;
  spec.calibration_sample = 50000;
  return spec;
}

esmm::NetworkConfig net_for(const esmm::FunnelSpec& spec) {
  esmm::NetworkConfig net;
  net.dense_input_dim = spec.dense_dim;
  net.n_categorical = spec.n_categorical;
  net.vocab_size = spec.vocab_size;
  return net;
}

const esmm::GroundTruth& toy_truth() {
  static const esmm::GroundTruth gt(esmm::synthesize_funnel(toy_spec()));
  return gt;
}

bool same_parameters(const Model& a, const Model& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->value != pb[i]->value) return false;
  }
  return true;
}

double brute_force_average_precision(const std::vector<double>& p, const std::vector<int>& y,
                                     const std::vector<double>& w) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 1) continue;
    double tp = 0.0, all = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] > p[i] || (p[j] == p[i] && j <= i)) {
        all += w[j];
        tp += y[j] == 1 ? w[j] : 0.0;
      }
    }
    num += w[i] * tp / all;
    den += w[i];
  }
  return num / den;
}

double total_loss(const esmm::EpochRecord& r) { return r.ctr_loss.value_or(0.0) + r.cvr_loss.value_or(0.0); }

}  // namespace

TEST_CASE("zero epochs leave the model unchanged") {
  const esmm::Dataset ds = esmm::generate_day(toy_truth(), 0, 2000, 1);
  esmm::TrainConfig cfg;
  cfg.epochs = 0;
  const Model before = Model::build(Design::kESMM, net_for(toy_spec()), 5);
  const esmm::TrainResult r = esmm::train(Model::build(Design::kESMM, net_for(toy_spec()), 5), ds, {}, cfg);
  CHECK(same_parameters(before, r.model));
  CHECK(r.history.epochs.empty());
}

TEST_CASE("training is deterministic") {
  const esmm::Dataset train_ds = esmm::generate_day(toy_truth(), 0, 5000, 2);
  const esmm::Dataset eval_ds = esmm::generate_day(toy_truth(), 1, 2000, 3);
  esmm::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  for (Design d : {Design::kIP, Design::kIPSP}) {
    const auto a = esmm::train(Model::build(d, net_for(toy_spec()), 1), train_ds, eval_ds, cfg);
    const auto b = esmm::train(Model::build(d, net_for(toy_spec()), 1), train_ds, eval_ds, cfg);
    CHECK(same_parameters(a.model, b.model));
    REQUIRE(a.history.epochs.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
      const auto& x = a.history.epochs[e];
      const auto& y = b.history.epochs[e];
      CHECK(x.ctr_loss == y.ctr_loss);
      CHECK(x.cvr_loss == y.cvr_loss);
      CHECK(x.eval.joint_ce == y.eval.joint_ce);
      CHECK(x.eval.joint_pr_auc == y.eval.joint_pr_auc);
      CHECK(x.eval.ctr_ce == y.eval.ctr_ce);
    }
  }
}

TEST_CASE("eval data must come from later days") {
  const esmm::Dataset train_ds = esmm::generate_day(toy_truth(), 1, 100, 1);
  const esmm::Dataset same_day = esmm::generate_day(toy_truth(), 1, 100, 2);
  const esmm::Dataset earlier = esmm::generate_day(toy_truth(), 0, 100, 3);
  esmm::TrainConfig cfg;
  cfg.epochs = 1;
  const Model m = Model::build(Design::kESP, net_for(toy_spec()), 1);
  CHECK_THROWS_AS(esmm::train(m, train_ds, same_day, cfg), esmm::ContractViolation);
  CHECK_THROWS_AS(esmm::train(m, train_ds, earlier, cfg), esmm::ContractViolation);
}

TEST_CASE("invalid train configs are rejected") {
  esmm::TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), esmm::ContractViolation);
  cfg = {};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), esmm::ContractViolation);
  cfg = {};
  cfg.epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), esmm::ContractViolation);
}

TEST_CASE("divergence aborts with a diagnostic") {
  const esmm::Dataset ds = esmm::generate_day(toy_truth(), 0, 3000, 4);
  esmm::TrainConfig cfg;
  cfg.optimizer = esmm::Optimizer::kSgd;
  cfg.learning_rate = 1e300;
  cfg.epochs = 1;
  CHECK_THROWS_AS(esmm::train(Model::build(Design::kESMM, net_for(toy_spec()), 1), ds, {}, cfg),
                  esmm::DivergenceError);
}

TEST_CASE("ESP approaches the Bayes floor on a toy funnel") {
  const esmm::Dataset train_ds = esmm::shuffle(esmm::generate_day(toy_truth(), 0, 100000, 5), 6);
  const esmm::Dataset eval_ds = esmm::generate_day(toy_truth(), 1, 50000, 7);
  const auto r = esmm::train(Model::build(Design::kESP, net_for(toy_spec()), 2), train_ds, eval_ds, {});
  const double bayes = esmm::bayes_ce(toy_truth(), eval_ds, esmm::Target::kJoint);
  CHECK(r.history.epochs.back().eval.joint_ce < 1.1 * bayes);
  CHECK(r.history.epochs.back().eval.joint_ce > bayes - 0.01);
}

TEST_CASE("evaluate matches the reference computations") {
  const esmm::Dataset ds = esmm::generate_day(toy_truth(), 2, 3000, 8);
  esmm::Predictions oracle;
  for (const auto& e : ds.examples) oracle.joint.push_back(esmm::true_joint(toy_truth(), e));
  CHECK(esmm::evaluate_predictions(oracle, ds).joint_ce ==
        esmm::bayes_ce(toy_truth(), ds, esmm::Target::kJoint));

  esmm::Predictions half;
  half.joint.assign(ds.size(), 0.5);
  CHECK(esmm::evaluate_predictions(half, ds).joint_ce == Approx(std::log(2.0)).epsilon(1e-12));

  const Model m = Model::build(Design::kESSPSplit, net_for(toy_spec()), 3);
  const esmm::Predictions p = m.predict(ds);
  std::vector<int> z;
  std::vector<double> w;
  for (const auto& e : ds.examples) {
    z.push_back(e.conversion);
    w.push_back(e.weight);
  }
  const esmm::MetricsRecord rec = esmm::evaluate(m, ds);
  CHECK(rec.joint_pr_auc == Approx(brute_force_average_precision(p.joint, z, w)).epsilon(1e-9));
  REQUIRE(rec.consistency_violation_rate.has_value());
  CHECK(*rec.consistency_violation_rate >= 0.0);
  CHECK(*rec.consistency_violation_rate <= 1.0);
  CHECK_FALSE(esmm::evaluate(Model::build(Design::kESP, net_for(toy_spec()), 3), ds).ctr_ce.has_value());
}

TEST_CASE("train loss falls for every design on the default funnel") {
  esmm::FunnelSpec spec;
  spec.calibration_sample = 50000;
  const esmm::GroundTruth gt(esmm::synthesize_funnel(spec));
  const esmm::Dataset ds = esmm::shuffle(
      esmm::downsample_negatives(esmm::generate_days(gt, 0, 2, 100000, 9), 10.0, 10), 11);
  esmm::TrainConfig cfg;
  for (Design d : {Design::kIP, Design::kESMM, Design::kESMM_NS, Design::kESSPSplit, Design::kIPSP,
                   Design::kESP}) {
    CAPTURE(esmm::design_name(d));
    const auto r = esmm::train(Model::build(d, net_for(spec), 4), ds, {}, cfg);
    REQUIRE(r.history.epochs.size() == 3);
    CHECK(total_loss(r.history.epochs.back()) < total_loss(r.history.epochs.front()));
  }
}

TEST_CASE("final eval CE does not depend on batch size in expectation") {
  const esmm::Dataset eval_ds = esmm::generate_day(toy_truth(), 2, 20000, 12);
  std::vector<double> small, large;
  for (int seed = 0; seed < 10; ++seed) {
    const esmm::Dataset train_ds = esmm::generate_day(toy_truth(), 0, 20000, 100 + seed);
    esmm::TrainConfig cfg;
    cfg.seed = 200 + seed;
    cfg.epochs = 4;
    cfg.batch_size = 128;
    small.push_back(
        esmm::train(Model::build(Design::kESP, net_for(toy_spec()), seed), train_ds, eval_ds, cfg)
            .history.epochs.back().eval.joint_ce);
    cfg.batch_size = 512;
    large.push_back(
        esmm::train(Model::build(Design::kESP, net_for(toy_spec()), seed), train_ds, eval_ds, cfg)
            .history.epochs.back().eval.joint_ce);
  }
  const double combined = std::sqrt(esmm::sample_variance(small) / small.size() +
                                    esmm::sample_variance(large) / large.size());
  CHECK(std::abs(esmm::mean(small) - esmm::mean(large)) < 3 * combined);
}

TEST_CASE("history exports one row per head and epoch") {
  const esmm::Dataset train_ds = esmm::generate_day(toy_truth(), 0, 2000, 13);
  const esmm::Dataset eval_ds = esmm::generate_day(toy_truth(), 1, 1000, 14);
  esmm::TrainConfig cfg;
  cfg.epochs = 2;
  const auto r = esmm::train(Model::build(Design::kIP, net_for(toy_spec()), 1), train_ds, eval_ds, cfg);
  std::ostringstream out;
  esmm::write_history_csv(r.history, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,head,loss,joint_ce,joint_pr_auc,calibration_ratio,ctr_ce,seconds");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 4);
}
