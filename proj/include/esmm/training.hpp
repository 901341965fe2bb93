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

#ifndef ESMM_TRAINING_HPP_
#define ESMM_TRAINING_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "esmm/funnel_data.hpp"
#include "esmm/metrics.hpp"
#include "esmm/models.hpp"

namespace esmm {

enum class Optimizer { kAdam, kSgd };

struct TrainConfig {
  double learning_rate = 2e-3;
  std::size_t batch_size = 256;
  int epochs = 3;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  std::optional<double> ctr_loss;
  std::optional<double> cvr_loss;
  MetricsRecord eval;
  double seconds = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  Model model;
  RunHistory history;
};

// Mini-batch training with one optimizer step per batch. IP's two towers are
// trained one after the other inside each epoch: the CTR tower over every
// example, then the CVR tower over the clicked examples.
// Every eval example must come from a later day than every train example.
TrainResult train(Model model, const Dataset& train_ds, const Dataset& eval_ds, const TrainConfig& cfg);

MetricsRecord evaluate(const Model& model, const Dataset& ds);

// Metrics for externally produced predictions (e.g. the true probabilities).
MetricsRecord evaluate_predictions(const Predictions& preds, const Dataset& ds);

// epoch,head,loss,joint_ce,joint_pr_auc,calibration_ratio,ctr_ce,seconds
void write_history_csv(const RunHistory& history, std::ostream& out);

}  // namespace esmm

#endif  // ESMM_TRAINING_HPP_
