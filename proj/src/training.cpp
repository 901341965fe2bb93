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

#include "esmm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "esmm/errors.hpp"
#include "esmm/random.hpp"

namespace esmm {
namespace {

constexpr std::uint64_t kEpochStream = 11;

void check_temporal_split(const Dataset& train_ds, const Dataset& eval_ds) {
  if (train_ds.empty() || eval_ds.empty()) return;
  int last_train = train_ds.examples.front().day;
  for (const Example& e : train_ds.examples) last_train = std::max(last_train, e.day);
  for (const Example& e : eval_ds.examples) {
    require(e.day > last_train, "train: eval day " + std::to_string(e.day) +
                                    " does not come after last train day " +
                                    std::to_string(last_train));
  }
}

struct RunningMean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> value() const {
    return n == 0 ? std::nullopt : std::optional<double>(sum / double(n));
  }
};

class Stepper {
 public:
  Stepper(Model& model, const TrainConfig& cfg) : cfg_(cfg), params_(model.parameters()) {}

  void step(const Gradients& grads) {
    if (cfg_.optimizer == Optimizer::kAdam) {
      adam_step<double>(params_, grads, adam_, cfg_.learning_rate);
    } else {
      sgd_step<double>(params_, grads, cfg_.learning_rate);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<Parameter*> params_;
  AdamState adam_;
};

// One pass over `order` in batches; returns per-head mean batch losses.
std::pair<RunningMean, RunningMean> run_pass(const Model& model, Stepper& stepper, const Dataset& ds,
                                             const std::vector<std::size_t>& order,
                                             std::size_t batch_size, LossScope scope) {
  RunningMean ctr, cvr;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    const Batch batch = make_batch(ds, idx);
    Tape tape;
    const Model::Loss loss = model.loss(tape, batch, scope);
    const double value = loss.total.value()(0, 0);
    if (!std::isfinite(value)) {
      throw DivergenceError("train: non-finite loss in batch starting at " + std::to_string(start));
    }
    if (loss.ctr) ctr.add(*loss.ctr);
    if (loss.cvr) cvr.add(*loss.cvr);
    stepper.step(tape.backward(loss.total));
  }
  return {ctr, cvr};
}

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "train: learning_rate must be positive");
  require(batch_size > 0, "train: batch_size must be positive");
  require(epochs >= 0, "train: epochs must be non-negative");
}

TrainResult train(Model model, const Dataset& train_ds, const Dataset& eval_ds, const TrainConfig& cfg) {
  cfg.validate();
  check_temporal_split(train_ds, eval_ds);
  TrainResult result{std::move(model), {}};
  Model& m = result.model;
  Stepper stepper(m, cfg);
  const bool sequential = m.design() == Design::kIP;

  std::vector<std::size_t> clicked;
  if (sequential) {
    for (std::size_t i = 0; i < train_ds.size(); ++i) {
      if (train_ds.examples[i].click == 1) clicked.push_back(i);
    }
  }
  std::vector<std::size_t> order(train_ds.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng({cfg.seed, kEpochStream, static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    if (sequential) {
      auto [ctr, unused] = run_pass(m, stepper, train_ds, order, cfg.batch_size, LossScope::kClickOnly);
      std::vector<std::size_t> clicked_order = clicked;
      for (std::size_t i = clicked_order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(clicked_order[i - 1], clicked_order[pick(rng)]);
      }
      auto [unused2, cvr] =
          run_pass(m, stepper, train_ds, clicked_order, cfg.batch_size, LossScope::kConversionOnly);
      rec.ctr_loss = ctr.value();
      rec.cvr_loss = cvr.value();
    } else {
      auto [ctr, cvr] = run_pass(m, stepper, train_ds, order, cfg.batch_size, LossScope::kAll);
      rec.ctr_loss = ctr.value();
      rec.cvr_loss = cvr.value();
    }
    if (!eval_ds.empty()) rec.eval = evaluate(m, eval_ds);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
  }
  return result;
}

MetricsRecord evaluate_predictions(const Predictions& preds, const Dataset& ds) {
  require(preds.joint.size() == ds.size(), "evaluate: prediction count differs from dataset");
  std::vector<int> z, y;
  std::vector<double> w;
  z.reserve(ds.size());
  y.reserve(ds.size());
  w.reserve(ds.size());
  for (const Example& e : ds.examples) {
    z.push_back(e.conversion);
    y.push_back(e.click);
    w.push_back(e.weight);
  }
  MetricsRecord r;
  r.joint_ce = weighted_ce(preds.joint, z, w);
  r.joint_pr_auc = pr_auc(preds.joint, z, w);
  r.calibration_ratio = calibration_ratio(preds.joint, z, w);
  if (preds.ctr) {
    r.ctr_ce = weighted_ce(*preds.ctr, y, w);
    if (std::find(y.begin(), y.end(), 1) != y.end()) {
      r.ctr_calibration_ratio = calibration_ratio(*preds.ctr, y, w);
    }
    std::size_t violations = 0;
    for (std::size_t i = 0; i < preds.joint.size(); ++i) {
      if (preds.joint[i] > (*preds.ctr)[i]) ++violations;
    }
    r.consistency_violation_rate = double(violations) / double(preds.joint.size());
  }
  return r;
}

MetricsRecord evaluate(const Model& model, const Dataset& ds) {
  return evaluate_predictions(model.predict(ds), ds);
}

void write_history_csv(const RunHistory& history, std::ostream& out) {
  out << "epoch,head,loss,joint_ce,joint_pr_auc,calibration_ratio,ctr_ce,seconds\n";
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  for (const EpochRecord& r : history.epochs) {
    for (const auto& [head, loss] : {std::pair{"ctr", r.ctr_loss}, std::pair{"cvr", r.cvr_loss}}) {
      if (!loss) continue;
      out << r.epoch << ',' << head << ',' << num(loss) << ',' << num(r.eval.joint_ce) << ','
          << num(r.eval.joint_pr_auc) << ',' << num(r.eval.calibration_ratio) << ','
          << num(r.eval.ctr_ce) << ',' << num(r.seconds) << '\n';
    }
  }
}

}  // namespace esmm
