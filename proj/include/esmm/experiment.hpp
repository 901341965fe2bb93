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

// Experiment harness: the six-model ablation with baseline-normalized
// statistics, the temporal-drift decay study, gradient checks and oracle
// self-tests, plus CSV/JSON report emission.

#ifndef ESMM_EXPERIMENT_HPP_
#define ESMM_EXPERIMENT_HPP_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "esmm/funnel_data.hpp"
#include "esmm/metrics.hpp"
#include "esmm/models.hpp"
#include "esmm/training.hpp"

namespace esmm {

// Written into every report header.
inline constexpr const char* kPerformanceFormula =
    "norm_perf = mean(IP joint_ce over seeds) / model joint_ce (higher is better)";

struct ExperimentConfig {
  FunnelSpec funnel;
  NetworkConfig net;
  TrainConfig train;
  // Per-model training overrides, keyed by design name.
  std::map<std::string, TrainConfig> overrides;
  std::vector<Design> models{Design::kIP, Design::kESMM, Design::kESMM_NS,
                             Design::kESSPSplit, Design::kIPSP, Design::kESP};
  int n_seeds = 10;
  std::uint64_t base_seed = 1;
  double downsample_factor = 10.0;
  int train_days = 4;
  std::size_t train_per_day = 200000;
  std::size_t eval_size = 50000;
  // Concurrent (model, seed) jobs.
  int workers = 1;
  std::string out_dir = "results";

  // Copies funnel feature dimensions into the network config and checks
  // every field. Throws ContractViolation.
  void resolve();
  void validate() const;
  std::string fingerprint() const;
  const TrainConfig& train_config_for(Design design) const;
};

// Reads a JSON config; absent keys keep their defaults.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

struct SeedData {
  Dataset train;
  Dataset eval;
};

// Train = days [0, train_days) downsampled and shuffled, drawn per seed.
// Eval = the next day at full space, drawn once from base_seed and shared by
// every seed so seed-to-seed spread reflects training alone.
SeedData make_seed_data(const GroundTruth& gt, const ExperimentConfig& cfg, int seed_index);
std::uint64_t seed_for(const ExperimentConfig& cfg, int seed_index);

struct RunRecord {
  Design model = Design::kIP;
  int seed = 0;
  bool ok = false;
  std::string error;
  MetricsRecord metrics;
  double norm_perf = 0.0;
  std::string dataset_fingerprint;
  // Eval examples with joint > ctr; only ESSP-Split can be nonzero.
  std::size_t joint_above_ctr = 0;
};

struct AblationReport {
  std::string config_fingerprint;
  std::vector<std::string> models;
  int n_seeds = 0;
  std::vector<RunRecord> runs;  // model-major, then seed
  ComparisonStats stats;
  bool stats_valid = false;

  bool any_failed() const;
  const RunRecord& run(Design model, int seed) const;
};

AblationReport run_ablation(const ExperimentConfig& cfg);

struct DriftReport {
  std::string config_fingerprint;
  std::vector<std::string> models;
  std::vector<int> offsets;  // n = 2..6
  // ce[model][seed][offset_index]
  std::vector<std::vector<std::vector<double>>> ce;

  double mean_ce(std::size_t model, std::size_t offset) const;
  double sem_ce(std::size_t model, std::size_t offset) const;
};

inline constexpr int kFirstDriftOffset = 2;
inline constexpr int kLastDriftOffset = 6;

// Trains on [0, train_days) and evaluates on day train_days - 1 + n.
DriftReport run_drift(const ExperimentConfig& cfg);

struct GradcheckEntry {
  std::string model;
  GradCheckReport report;
};

struct GradcheckOptions {
  std::size_t batch_size = 6;
  std::uint64_t seed = 3;
  bool inject_fault = false;
};

std::vector<GradcheckEntry> run_gradcheck(const NetworkConfig& net,
                                          const GradcheckOptions& opts = {});

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<SelftestResult> run_selftest();

enum class ReportFormat { kCsv, kJson };

// CSV writes <dir>/ablation.csv and <dir>/ablation_stats.csv; JSON writes
// <dir>/ablation.json. Returns the written paths. Throws IoError.
std::vector<std::string> emit_report(const AblationReport& report, ReportFormat format,
                                     const std::string& dir);
void write_ablation_csv(const AblationReport& report, std::ostream& out);
void write_stats_csv(const AblationReport& report, std::ostream& out);
void write_ablation_json(const AblationReport& report, std::ostream& out);

struct ParsedAblationRow {
  std::string model;
  int seed = 0;
  double joint_ce = 0.0;
  double norm_perf = 0.0;
};
// Reads rows back from write_ablation_csv output (comment lines skipped).
std::vector<ParsedAblationRow> parse_ablation_csv(std::istream& in);

std::vector<std::string> emit_drift_report(const DriftReport& report, const std::string& dir);

}  // namespace esmm

#endif  // ESMM_EXPERIMENT_HPP_
