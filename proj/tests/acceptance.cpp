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


// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `--only 3,7` runs a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "esmm/experiment.hpp"

using esmm::Design;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Shared between criteria 3, 4, 5 and 9 so the default ablation runs twice, not four times.
struct AblationCache {
  std::string out_dir;
  std::optional<esmm::AblationReport> report;
  double seconds = 0.0;

  const esmm::AblationReport& get() {
    if (!report) {
      esmm::ExperimentConfig cfg;
      cfg.resolve();
      const auto t0 = Clock::now();
      report = esmm::run_ablation(cfg);
      seconds = seconds_since(t0);
      esmm::emit_report(*report, esmm::ReportFormat::kCsv, out_dir + "/first");
    }
    return *report;
  }
};

Outcome gradient_correctness() {
  esmm::ExperimentConfig cfg;
  cfg.resolve();
  const auto t0 = Clock::now();
  const auto entries = esmm::run_gradcheck(cfg.net);
  const double secs = seconds_since(t0);
  bool ok = entries.size() == 6;
  double worst = 0.0;
  std::string failed;
  for (const auto& e : entries) {
    worst = std::max(worst, e.report.max_relative_error);
    if (!e.report.passed()) {
      ok = false;
      failed += " " + e.model;
    }
  }
  return {ok && secs < 60.0, "max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs) +
                                 (failed.empty() ? "" : ", failed:" + failed)};
}

Outcome oracle_floor() {
  esmm::FunnelSpec spec;
  spec.dense_dim = 4;
  spec.n_categorical = 1;
  spec.vocab_size = 10;
  spec.click_signal = 2.0;
  spec.conv_signal = 2.0;
  spec.base_click_rate_target = 0.3;
  spec.base_conv_rate_target = 0.3;
  esmm::NetworkConfig net;
  net.dense_input_dim = spec.dense_dim;
  net.n_categorical = spec.n_categorical;
  net.vocab_size = spec.vocab_size;
  const auto t0 = Clock::now();
  const esmm::GroundTruth gt(esmm::synthesize_funnel(spec));
  const esmm::Dataset train_ds = esmm::shuffle(esmm::generate_day(gt, 0, 100000, 1), 2);
  const esmm::Dataset eval_ds = esmm::generate_day(gt, 1, 200000, 3);
  const auto trained = esmm::train(esmm::Model::build(Design::kESP, net, 4), train_ds, {}, esmm::TrainConfig{});
  const double ce = esmm::evaluate(trained.model, eval_ds).joint_ce;
  const double bayes = esmm::bayes_ce(gt, eval_ds, esmm::Target::kJoint);
  const double secs = seconds_since(t0);
  const double excess = ce / bayes - 1.0;
  return {excess <= 0.10 && secs < 300.0,
          "ESP CE " + fmt("%.5f", ce) + " vs bayes " + fmt("%.5f", bayes) + " (" + fmt("%+.2f%%", 100 * excess) +
              "), " + fmt("%.1f s", secs)};
}

Outcome calibration(AblationCache& cache) {
  const auto& r = cache.get();
  std::vector<double> ratios;
  for (int s = 0; s < r.n_seeds; ++s) {
    const auto& run = r.run(Design::kIP, s);
    if (run.ok && run.metrics.ctr_calibration_ratio) ratios.push_back(*run.metrics.ctr_calibration_ratio);
  }
  if (ratios.size() < 10) return {false, "fewer than 10 successful IP runs"};
  const double m = esmm::mean(ratios);
  return {m >= 0.9 && m <= 1.1, "IP CTR calibration mean " + fmt("%.4f", m) + " over " +
                                    std::to_string(ratios.size()) + " seeds at f=10"};
}

Outcome directional_ablation(AblationCache& cache) {
  const auto& r = cache.get();
  if (!r.stats_valid) return {false, "ablation had failed runs"};
  const auto& s = r.stats;
  auto idx = [&](const char* name) {
    for (std::size_t i = 0; i < s.models.size(); ++i) {
      if (s.models[i] == name) return static_cast<Eigen::Index>(i);
    }
    throw std::runtime_error(std::string("missing model ") + name);
  };
  const auto esp = idx("ESP"), ipsp = idx("IPSP"), esmm_i = idx("ESMM");
  const bool a = s.mean_norm_perf[esp] < 1.0 && s.mean_norm_perf[ipsp] > 1.0;
  const bool b = s.p_values(ipsp, esp) < 0.05 && s.mean_norm_perf[ipsp] > s.mean_norm_perf[esp] &&
                 s.p_values(esmm_i, esp) < 0.05 && s.mean_norm_perf[esmm_i] > s.mean_norm_perf[esp];
  bool c = true;
  for (Eigen::Index m = 0; m < static_cast<Eigen::Index>(s.models.size()); ++m) {
    if (m != ipsp && s.p_values(m, ipsp) < 0.01 && s.mean_norm_perf[m] > s.mean_norm_perf[ipsp]) c = false;
  }
  std::string detail;
  for (std::size_t i = 0; i < s.models.size(); ++i) {
    detail += s.models[i] + "=" + fmt("%.4f", s.mean_norm_perf[i]) + " ";
  }
  detail += "| p(IPSP,ESP)=" + fmt("%.2g", s.p_values(ipsp, esp)) + " p(ESMM,ESP)=" +
            fmt("%.2g", s.p_values(esmm_i, esp)) + " | (a)" + (a ? "ok" : "no") + " (b)" + (b ? "ok" : "no") +
            " (c)" + (c ? "ok" : "no") + " | " + fmt("%.0f s", cache.seconds);
  return {a && b && c && cache.seconds < 1800.0, detail};
}

Outcome structural_invariants(AblationCache& cache) {
  const auto& r = cache.get();
  std::size_t violations = 0, checked = 0;
  std::vector<double> split_rates;
  for (const auto& run : r.runs) {
    if (!run.ok) return {false, "failed run"};
    switch (run.model) {
      case Design::kESMM:
      case Design::kESMM_NS:
      case Design::kIP:
      case Design::kIPSP:
        violations += run.joint_above_ctr;
        ++checked;
        break;
      case Design::kESSPSplit:
        if (!run.metrics.consistency_violation_rate || !std::isfinite(*run.metrics.consistency_violation_rate)) {
          return {false, "ESSP-Split violation rate missing"};
        }
        split_rates.push_back(*run.metrics.consistency_violation_rate);
        break;
      default:
        break;
    }
  }
  const bool ok = checked > 0 && violations == 0 && !split_rates.empty();
  return {ok, std::to_string(violations) + " joint>ctr predictions over " + std::to_string(checked) +
                  " product-model runs; ESSP-Split violation rate " +
                  (split_rates.empty() ? std::string("n/a") : fmt("%.4f", esmm::mean(split_rates)))};
}

Outcome ipsp_gating() {
  esmm::ExperimentConfig cfg;
  cfg.resolve();
  const esmm::GroundTruth gt(esmm::synthesize_funnel(cfg.funnel));
  const esmm::Dataset ds = esmm::generate_day(gt, 0, 20000, 5);
  esmm::Model m = esmm::Model::build(Design::kIPSP, cfg.net, 6);
  std::vector<std::size_t> mixed, unclicked;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.examples[i].click == 1 && mixed.size() < 200) mixed.push_back(i);
    if (ds.examples[i].click == 0 && unclicked.size() < 256) unclicked.push_back(i);
  }
  mixed.insert(mixed.end(), unclicked.begin(), unclicked.begin() + 56);
  esmm::AdamState state;
  auto params = m.parameters();
  auto step = [&](const std::vector<std::size_t>& idx) {
    esmm::Tape tape;
    const auto loss = m.loss(tape, esmm::make_batch(ds, idx));
    esmm::adam_step<double>(params, tape.backward(loss.total), state, cfg.train.learning_rate);
  };
  // Warm-up gives the conversion head non-zero optimizer moments.
  for (int i = 0; i < 5; ++i) step(mixed);
  std::vector<Eigen::MatrixXd> before, trunk_before;
  const auto exclusive = m.conversion_exclusive_parameters();
  for (const auto* p : exclusive) before.push_back(p->value);
  for (const auto* p : params) trunk_before.push_back(p->value);
  step(unclicked);
  bool identical = true;
  for (std::size_t i = 0; i < exclusive.size(); ++i) {
    identical = identical && std::memcmp(before[i].data(), exclusive[i]->value.data(),
                                         sizeof(double) * before[i].size()) == 0;
  }
  bool something_moved = false;
  for (std::size_t i = 0; i < params.size(); ++i) something_moved |= params[i]->value != trunk_before[i];
  return {identical && something_moved && !exclusive.empty(),
          std::to_string(exclusive.size()) + " CVR-exclusive tensors " +
              (identical ? "bit-identical" : "CHANGED") + "; shared/CTR parameters " +
              (something_moved ? "updated" : "unchanged")};
}

double brute_force_ap(const std::vector<double>& p, const std::vector<int>& y, const std::vector<double>& w) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 1) continue;
    double tp = 0.0, all = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] > p[i] || (p[j] == p[i] && j <= i)) {
        all += w[j];
        if (y[j] == 1) tp += w[j];
      }
    }
    num += w[i] * tp / all;
    den += w[i];
  }
  return num / den;
}

Outcome pr_auc_oracle() {
  esmm::Rng rng(31337);
  std::uniform_int_distribution<int> size(2, 200);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int done = 0;
  double worst = 0.0;
  while (done < 1000) {
    const int n = size(rng);
    std::vector<double> p(n), w(n);
    std::vector<int> y(n);
    int pos = 0;
    const int levels = 1 + static_cast<int>(u(rng) * 30);
    for (int i = 0; i < n; ++i) {
      p[i] = std::floor(u(rng) * levels) / levels;
      y[i] = u(rng) < 0.25 ? 1 : 0;
      w[i] = u(rng) < 0.5 ? 1.0 : 10.0 * u(rng) + 0.01;
      pos += y[i];
    }
    if (pos == 0 || pos == n) continue;
    worst = std::max(worst, std::abs(esmm::pr_auc(p, y, w) - brute_force_ap(p, y, w)));
    ++done;
  }
  return {worst <= 1e-9, "1000 instances, max |diff| " + fmt("%.2e", worst)};
}

Outcome drift_harness() {
  const auto t0 = Clock::now();
  esmm::ExperimentConfig cfg;
  cfg.models = {Design::kIP, Design::kESMM};
  cfg.resolve();
  const esmm::DriftReport flat = esmm::run_drift(cfg);
  bool is_flat = true;
  double worst_z = 0.0;
  for (std::size_t m = 0; m < flat.models.size(); ++m) {
    for (std::size_t a = 0; a < flat.offsets.size(); ++a) {
      for (std::size_t b = a + 1; b < flat.offsets.size(); ++b) {
        const double se = std::hypot(flat.sem_ce(m, a), flat.sem_ce(m, b));
        const double z = std::abs(flat.mean_ce(m, a) - flat.mean_ce(m, b)) / se;
        worst_z = std::max(worst_z, z);
        is_flat = is_flat && z < 3.0;
      }
    }
  }
  cfg.funnel.drift_rate = 0.05;
  cfg.resolve();
  const esmm::DriftReport drifting = esmm::run_drift(cfg);
  bool decays = true;
  std::string detail;
  for (std::size_t m = 0; m < drifting.models.size(); ++m) {
    const double d2 = drifting.mean_ce(m, 0), d6 = drifting.mean_ce(m, drifting.offsets.size() - 1);
    decays = decays && d6 > d2;
    detail += " " + drifting.models[m] + " day2 " + fmt("%.5f", d2) + " -> day6 " + fmt("%.5f", d6) + ";";
  }
  return {is_flat && decays, "rate 0: max pairwise gap " + fmt("%.2f", worst_z) + " combined SE; rate 0.05:" +
                                 detail + fmt(" %.0f s", seconds_since(t0))};
}

Outcome reproducibility(AblationCache& cache) {
  cache.get();
  esmm::ExperimentConfig cfg;
  cfg.resolve();
  const esmm::AblationReport again = esmm::run_ablation(cfg);
  esmm::emit_report(again, esmm::ReportFormat::kCsv, cache.out_dir + "/second");
  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  bool same = true;
  for (const char* name : {"ablation.csv", "ablation_stats.csv"}) {
    const std::string a = slurp(cache.out_dir + "/first/" + name);
    const std::string b = slurp(cache.out_dir + "/second/" + name);
    same = same && !a.empty() && a == b;
  }
  return {same, same ? "ablation.csv and ablation_stats.csv byte-identical" : "outputs differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"esmm-lab acceptance suite"};
  std::string out_dir = "acceptance_out";
  std::vector<int> only;
  app.add_option("--out", out_dir, "Directory for ablation outputs");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  std::filesystem::create_directories(out_dir);

  AblationCache cache;
  cache.out_dir = out_dir;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"oracle floor", oracle_floor},
      {"CTR calibration under downsampling", [&] { return calibration(cache); }},
      {"directional ablation", [&] { return directional_ablation(cache); }},
      {"structural invariants", [&] { return structural_invariants(cache); }},
      {"IPSP gradient gating", ipsp_gating},
      {"PR-AUC oracle equivalence", pr_auc_oracle},
      {"drift harness", drift_harness},
      {"reproducibility", [&] { return reproducibility(cache); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && selected.count(id) == 0) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
