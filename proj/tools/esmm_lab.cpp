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

// esmm-lab: ablation, drift, gradcheck and selftest subcommands.
//
// Exit codes: 0 success, 1 a run or check failed, 2 invalid configuration.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "esmm/errors.hpp"
#include "esmm/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitInvalidConfig = 2;

struct Overrides {
  std::string config_path;
  std::optional<int> seeds;
  std::string models;
  std::string out;
  std::optional<double> downsample_factor;
  std::optional<int> workers;
  std::optional<int> epochs;
  std::optional<std::size_t> train_per_day;
  std::optional<std::size_t> eval_size;
  std::optional<double> drift_rate;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON experiment config");
  cmd->add_option("--seeds", o.seeds, "Number of paired seeds");
  cmd->add_option("--models", o.models, "Comma-separated model names (IP,ESMM,ESMM-NS,ESSP-Split,IPSP,ESP)");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--downsample-factor", o.downsample_factor, "Negative downsampling factor f");
  cmd->add_option("--workers", o.workers, "Concurrent training jobs");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--train-per-day", o.train_per_day, "Train impressions per day");
  cmd->add_option("--eval-size", o.eval_size, "Eval impressions");
}

esmm::ExperimentConfig build_config(const Overrides& o) {
  esmm::ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = esmm::load_experiment_config(o.config_path);
  if (o.seeds) cfg.n_seeds = *o.seeds;
  if (!o.models.empty()) {
    cfg.models.clear();
    std::stringstream ss(o.models);
    std::string name;
    while (std::getline(ss, name, ',')) cfg.models.push_back(esmm::parse_design(name));
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.downsample_factor) cfg.downsample_factor = *o.downsample_factor;
  if (o.workers) cfg.workers = *o.workers;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.train_per_day) cfg.train_per_day = *o.train_per_day;
  if (o.eval_size) cfg.eval_size = *o.eval_size;
  if (o.drift_rate) cfg.funnel.drift_rate = *o.drift_rate;
  cfg.resolve();
  return cfg;
}

int run_ablation_cmd(const Overrides& o, const std::string& format) {
  const esmm::ExperimentConfig cfg = build_config(o);
  const esmm::AblationReport report = esmm::run_ablation(cfg);
  std::vector<std::string> paths;
  if (format == "csv" || format == "both") {
    auto p = esmm::emit_report(report, esmm::ReportFormat::kCsv, cfg.out_dir);
    paths.insert(paths.end(), p.begin(), p.end());
  }
  if (format == "json" || format == "both") {
    auto p = esmm::emit_report(report, esmm::ReportFormat::kJson, cfg.out_dir);
    paths.insert(paths.end(), p.begin(), p.end());
  }
  if (report.stats_valid) {
    const auto& s = report.stats;
    std::printf("%-11s %14s %10s  %s\n", "model", "norm_perf", "sem", "better than (p < 0.01)");
    for (std::size_t i = 0; i < s.models.size(); ++i) {
      std::string better;
      for (const auto& b : s.better_than[i]) better += (better.empty() ? "" : ", ") + b;
      std::printf("%-11s %14.6f %10.6f  %s\n", s.models[i].c_str(), s.mean_norm_perf[i], s.sem[i],
                  better.c_str());
    }
  }
  for (const auto& r : report.runs) {
    if (!r.ok) {
      std::fprintf(stderr, "run failed: %s seed %d: %s\n", std::string(esmm::design_name(r.model)).c_str(),
                   r.seed, r.error.c_str());
    }
  }
  for (const auto& p : paths) std::printf("wrote %s\n", p.c_str());
  return report.any_failed() ? kExitRunFailure : kExitOk;
}

int run_drift_cmd(Overrides o) {
  esmm::ExperimentConfig cfg = build_config(o);
  if (o.models.empty() && o.config_path.empty()) {
    cfg.models = {esmm::Design::kIP, esmm::Design::kESMM};
  }
  const esmm::DriftReport report = esmm::run_drift(cfg);
  std::printf("%-11s", "model");
  for (int n : report.offsets) std::printf("  day %d mean CE", n);
  std::printf("\n");
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    std::printf("%-11s", report.models[m].c_str());
    for (std::size_t k = 0; k < report.offsets.size(); ++k) std::printf("  %14.6f", report.mean_ce(m, k));
    std::printf("\n");
  }
  for (const auto& p : esmm::emit_drift_report(report, cfg.out_dir)) std::printf("wrote %s\n", p.c_str());
  return kExitOk;
}

int run_gradcheck_cmd(const Overrides& o, bool inject_fault) {
  const esmm::ExperimentConfig cfg = build_config(o);
  esmm::GradcheckOptions opts;
  opts.inject_fault = inject_fault;
  bool ok = true;
  for (const auto& e : esmm::run_gradcheck(cfg.net, opts)) {
    std::printf("%-11s %s  checked=%zu skipped_nonsmooth=%zu max_rel_err=%.3e max_abs_err=%.3e\n",
                e.model.c_str(), e.report.passed() ? "PASS" : "FAIL", e.report.checked,
                e.report.skipped_nonsmooth, e.report.max_relative_error, e.report.max_absolute_error);
    ok = ok && e.report.passed();
  }
  return ok ? kExitOk : kExitRunFailure;
}

int run_selftest_cmd() {
  bool ok = true;
  for (const auto& r : esmm::run_selftest()) {
    std::printf("%s  %s%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.empty() ? "" : "  ",
                r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitRunFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entire-space multi-task conversion modeling lab"};
  app.require_subcommand(1);

  Overrides ablation_opts, drift_opts, grad_opts;
  std::string format = "csv";
  bool inject_fault = false;

  auto* ablation = app.add_subcommand("ablation", "Six-model ablation with baseline-normalized statistics");
  add_common(ablation, ablation_opts);
  ablation->add_option("--format", format, "csv, json or both")->check(CLI::IsMember({"csv", "json", "both"}));

  auto* drift = app.add_subcommand("drift", "Performance decay on days 2..6 after training");
  add_common(drift, drift_opts);
  drift->add_option("--drift-rate", drift_opts.drift_rate, "Per-day generative weight drift");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of all six designs");
  gradcheck->add_option("--config", grad_opts.config_path, "JSON experiment config");
  gradcheck->add_flag("--inject-fault", inject_fault, "Corrupt analytic gradients (checks the checker)");

  app.add_subcommand("selftest", "Oracle self-tests");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInvalidConfig;
  }

  try {
    if (*ablation) return run_ablation_cmd(ablation_opts, format);
    if (*drift) return run_drift_cmd(drift_opts);
    if (*gradcheck) return run_gradcheck_cmd(grad_opts, inject_fault);
    return run_selftest_cmd();
  } catch (const esmm::ContractViolation& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kExitInvalidConfig;
  } catch (const esmm::IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kExitRunFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRunFailure;
  }
}
