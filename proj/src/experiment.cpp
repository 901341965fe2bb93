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

#include "esmm/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "esmm/errors.hpp"
#include "esmm/random.hpp"

namespace esmm {
namespace {

using nlohmann::json;

enum : std::uint64_t {
  kSeedStream = 101,
  kDownsampleSeedStream = 102,
  kShuffleSeedStream = 103,
  kEvalSeedStream = 104,
  kInitSeedStream = 105,
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), "config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    require(ok, "config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

TrainConfig parse_train(const json& j, TrainConfig t) {
  check_keys(j, {"learning_rate", "batch_size", "epochs", "optimizer", "seed"}, "train");
  read_if(j, "learning_rate", t.learning_rate);
  read_if(j, "batch_size", t.batch_size);
  read_if(j, "epochs", t.epochs);
  read_if(j, "seed", t.seed);
  if (j.contains("optimizer")) {
    const auto name = j.at("optimizer").get<std::string>();
    require(name == "adam" || name == "sgd", "config: optimizer must be adam or sgd");
    t.optimizer = name == "adam" ? Optimizer::kAdam : Optimizer::kSgd;
  }
  return t;
}

void write_header(std::ostream& out, const AblationReport& report, const char* title) {
  out << "# esmm-lab " << title << "\n";
  out << "# " << kPerformanceFormula << "\n";
  out << "# config_fingerprint=" << report.config_fingerprint << "\n";
}

}  // namespace

void ExperimentConfig::resolve() {
  net.dense_input_dim = funnel.dense_dim;
  net.n_categorical = funnel.n_categorical;
  net.vocab_size = funnel.vocab_size;
  validate();
}

void ExperimentConfig::validate() const {
  net.validate();
  train.validate();
  for (const auto& [name, t] : overrides) {
    parse_design(name);
    t.validate();
  }
  require(!models.empty(), "experiment: no models selected");
  require(n_seeds >= 2, "experiment: need at least 2 seeds");
  require(downsample_factor >= 1.0, "experiment: downsample factor must be >= 1");
  require(train_days >= 1, "experiment: train_days must be >= 1");
  require(funnel.n_days > train_days, "experiment: funnel needs an eval day after the train days");
  require(train_per_day > 0 && eval_size > 0, "experiment: dataset sizes must be positive");
  require(workers >= 1, "experiment: workers must be >= 1");
  require(net.dense_input_dim == funnel.dense_dim && net.n_categorical == funnel.n_categorical &&
              net.vocab_size == funnel.vocab_size,
          "experiment: network feature dimensions differ from the funnel");
}

std::string ExperimentConfig::fingerprint() const {
  Fnv1a h;
  const FunnelSpec& f = funnel;
  for (double v : {f.click_signal, f.conv_signal, f.categorical_signal, f.correlation,
                   f.base_click_rate_target, f.base_conv_rate_target, f.drift_rate}) {
    h.update(v);
  }
  for (std::int64_t v : {std::int64_t{f.dense_dim}, std::int64_t{f.n_categorical},
                         std::int64_t{f.vocab_size}, std::int64_t{f.n_days},
                         static_cast<std::int64_t>(f.seed), std::int64_t{f.calibration_sample}}) {
    h.update(v);
  }
  for (int v : {net.embedding_dim, net.shared_layer_dims[0], net.shared_layer_dims[1],
                net.head_layer_dims[0], net.head_layer_dims[1]}) {
    h.update(std::int64_t{v});
  }
  auto hash_train = [&h](const TrainConfig& t) {
    h.update(t.learning_rate);
    h.update(static_cast<std::int64_t>(t.batch_size));
    h.update(std::int64_t{t.epochs});
    h.update(std::int64_t{t.optimizer == Optimizer::kAdam ? 0 : 1});
  };
  hash_train(train);
  for (const auto& [name, t] : overrides) {
    h.update(name);
    hash_train(t);
  }
  for (Design d : models) h.update(design_name(d));
  h.update(std::int64_t{n_seeds});
  h.update(static_cast<std::int64_t>(base_seed));
  h.update(downsample_factor);
  h.update(std::int64_t{train_days});
  h.update(static_cast<std::int64_t>(train_per_day));
  h.update(static_cast<std::int64_t>(eval_size));
  return h.hex();
}

const TrainConfig& ExperimentConfig::train_config_for(Design design) const {
  auto it = overrides.find(std::string(design_name(design)));
  return it == overrides.end() ? train : it->second;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    check_keys(j,
               {"funnel", "network", "train", "overrides", "models", "seeds", "base_seed",
                "downsample_factor", "train_days", "train_per_day", "eval_size", "workers", "out"},
               "top level");
    if (j.contains("funnel")) {
      const json& f = j.at("funnel");
      check_keys(f,
                 {"dense_dim", "n_categorical", "vocab_size", "click_signal", "conv_signal",
                  "categorical_signal", "correlation", "base_click_rate", "base_conv_rate",
                  "drift_rate", "n_days", "seed", "calibration_sample"},
                 "funnel");
      read_if(f, "dense_dim", cfg.funnel.dense_dim);
      read_if(f, "n_categorical", cfg.funnel.n_categorical);
      read_if(f, "vocab_size", cfg.funnel.vocab_size);
      read_if(f, "click_signal", cfg.funnel.click_signal);
      read_if(f, "conv_signal", cfg.funnel.conv_signal);
      read_if(f, "categorical_signal", cfg.funnel.categorical_signal);
      read_if(f, "correlation", cfg.funnel.correlation);
      read_if(f, "base_click_rate", cfg.funnel.base_click_rate_target);
      read_if(f, "base_conv_rate", cfg.funnel.base_conv_rate_target);
      read_if(f, "drift_rate", cfg.funnel.drift_rate);
      read_if(f, "n_days", cfg.funnel.n_days);
      read_if(f, "seed", cfg.funnel.seed);
      read_if(f, "calibration_sample", cfg.funnel.calibration_sample);
    }
    if (j.contains("network")) {
      const json& n = j.at("network");
      check_keys(n, {"embedding_dim", "shared_layer_dims", "head_layer_dims"}, "network");
      read_if(n, "embedding_dim", cfg.net.embedding_dim);
      read_if(n, "shared_layer_dims", cfg.net.shared_layer_dims);
      read_if(n, "head_layer_dims", cfg.net.head_layer_dims);
    }
    if (j.contains("train")) cfg.train = parse_train(j.at("train"), cfg.train);
    if (j.contains("overrides")) {
      for (auto it = j.at("overrides").begin(); it != j.at("overrides").end(); ++it) {
        parse_design(it.key());
        cfg.overrides[it.key()] = parse_train(it.value(), cfg.train);
      }
    }
    if (j.contains("models")) {
      cfg.models.clear();
      for (const auto& m : j.at("models")) cfg.models.push_back(parse_design(m.get<std::string>()));
    }
    read_if(j, "seeds", cfg.n_seeds);
    read_if(j, "base_seed", cfg.base_seed);
    read_if(j, "downsample_factor", cfg.downsample_factor);
    read_if(j, "train_days", cfg.train_days);
    read_if(j, "train_per_day", cfg.train_per_day);
    read_if(j, "eval_size", cfg.eval_size);
    read_if(j, "workers", cfg.workers);
    read_if(j, "out", cfg.out_dir);
  } catch (const json::exception& e) {
    throw ContractViolation(std::string("config: ") + e.what());
  }
  cfg.resolve();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::uint64_t seed_for(const ExperimentConfig& cfg, int seed_index) {
  return mix_seed({cfg.base_seed, kSeedStream, static_cast<std::uint64_t>(seed_index)});
}

SeedData make_seed_data(const GroundTruth& gt, const ExperimentConfig& cfg, int seed_index) {
  const std::uint64_t seed = seed_for(cfg, seed_index);
  SeedData d;
  Dataset raw = generate_days(gt, 0, cfg.train_days, cfg.train_per_day, seed);
  d.train = shuffle(downsample_negatives(raw, cfg.downsample_factor, mix_seed({seed, kDownsampleSeedStream})),
                    mix_seed({seed, kShuffleSeedStream}));
  d.eval = generate_day(gt, cfg.train_days, cfg.eval_size, mix_seed({cfg.base_seed, kEvalSeedStream}));
  return d;
}

bool AblationReport::any_failed() const {
  for (const auto& r : runs) {
    if (!r.ok) return true;
  }
  return false;
}

const RunRecord& AblationReport::run(Design model, int seed) const {
  for (const auto& r : runs) {
    if (r.model == model && r.seed == seed) return r;
  }
  throw ContractViolation("ablation report: no run for " + std::string(design_name(model)) +
                          " seed " + std::to_string(seed));
}

AblationReport run_ablation(const ExperimentConfig& cfg) {
  cfg.validate();
  require(std::find(cfg.models.begin(), cfg.models.end(), Design::kIP) != cfg.models.end(),
          "ablation: the IP baseline must be among the selected models");
  const GroundTruth gt(synthesize_funnel(cfg.funnel));
  AblationReport report;
  report.config_fingerprint = cfg.fingerprint();
  report.n_seeds = cfg.n_seeds;
  for (Design d : cfg.models) report.models.emplace_back(design_name(d));
  const std::size_t n_models = cfg.models.size();
  report.runs.resize(n_models * static_cast<std::size_t>(cfg.n_seeds));

  for (int s = 0; s < cfg.n_seeds; ++s) {
    const SeedData data = make_seed_data(gt, cfg, s);
    const std::string fp = data.train.fingerprint();
    const std::uint64_t seed = seed_for(cfg, s);
    parallel_for(n_models, cfg.workers, [&](std::size_t m) {
      RunRecord& rec = report.runs[m * static_cast<std::size_t>(cfg.n_seeds) + static_cast<std::size_t>(s)];
      rec.model = cfg.models[m];
      rec.seed = s;
      rec.dataset_fingerprint = fp;
      try {
        TrainConfig tc = cfg.train_config_for(rec.model);
        tc.seed = seed;
        // Evaluate once after training, not per epoch.
        Model model = Model::build(rec.model, cfg.net, mix_seed({seed, kInitSeedStream}));
        TrainResult trained = train(std::move(model), data.train, Dataset{}, tc);
        const Predictions preds = trained.model.predict(data.eval);
        rec.metrics = evaluate_predictions(preds, data.eval);
        if (preds.ctr) {
          for (std::size_t i = 0; i < preds.joint.size(); ++i) {
            if (preds.joint[i] > (*preds.ctr)[i]) ++rec.joint_above_ctr;
          }
        }
        rec.ok = std::isfinite(rec.metrics.joint_ce);
        if (!rec.ok) rec.error = "non-finite eval cross-entropy";
      } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
      }
    });
  }

  if (!report.any_failed()) {
    std::vector<std::vector<double>> ces(n_models);
    for (std::size_t m = 0; m < n_models; ++m) {
      for (int s = 0; s < cfg.n_seeds; ++s) {
        ces[m].push_back(report.runs[m * static_cast<std::size_t>(cfg.n_seeds) + static_cast<std::size_t>(s)]
                             .metrics.joint_ce);
      }
    }
    report.stats = compare_models(report.models, ces, "IP");
    report.stats_valid = true;
    for (std::size_t m = 0; m < n_models; ++m) {
      for (int s = 0; s < cfg.n_seeds; ++s) {
        report.runs[m * static_cast<std::size_t>(cfg.n_seeds) + static_cast<std::size_t>(s)].norm_perf =
            report.stats.scores[m][static_cast<std::size_t>(s)];
      }
    }
  }
  return report;
}

double DriftReport::mean_ce(std::size_t model, std::size_t offset) const {
  std::vector<double> xs;
  for (const auto& seed : ce[model]) xs.push_back(seed[offset]);
  return mean(xs);
}

double DriftReport::sem_ce(std::size_t model, std::size_t offset) const {
  std::vector<double> xs;
  for (const auto& seed : ce[model]) xs.push_back(seed[offset]);
  return standard_error(xs);
}

DriftReport run_drift(const ExperimentConfig& cfg) {
  cfg.validate();
  require(cfg.funnel.n_days >= cfg.train_days + kLastDriftOffset,
          "drift: funnel.n_days must be at least train_days + 6");
  const GroundTruth gt(synthesize_funnel(cfg.funnel));
  DriftReport report;
  report.config_fingerprint = cfg.fingerprint();
  for (int n = kFirstDriftOffset; n <= kLastDriftOffset; ++n) report.offsets.push_back(n);
  for (Design d : cfg.models) report.models.emplace_back(design_name(d));
  const std::size_t n_models = cfg.models.size();
  report.ce.assign(n_models, std::vector<std::vector<double>>(
                                 static_cast<std::size_t>(cfg.n_seeds),
                                 std::vector<double>(report.offsets.size(), 0.0)));
  std::vector<std::string> errors(n_models);
  for (int s = 0; s < cfg.n_seeds; ++s) {
    const SeedData data = make_seed_data(gt, cfg, s);
    const std::uint64_t seed = seed_for(cfg, s);
    std::vector<Dataset> eval_days;
    for (int n : report.offsets) {
      const int day = cfg.train_days - 1 + n;
      eval_days.push_back(generate_day(gt, day, cfg.eval_size, mix_seed({seed, kEvalSeedStream, std::uint64_t(day)})));
    }
    parallel_for(n_models, cfg.workers, [&](std::size_t m) {
      try {
        TrainConfig tc = cfg.train_config_for(cfg.models[m]);
        tc.seed = seed;
        Model model = Model::build(cfg.models[m], cfg.net, mix_seed({seed, kInitSeedStream}));
        TrainResult trained = train(std::move(model), data.train, Dataset{}, tc);
        for (std::size_t k = 0; k < eval_days.size(); ++k) {
          report.ce[m][static_cast<std::size_t>(s)][k] = evaluate(trained.model, eval_days[k]).joint_ce;
        }
      } catch (const std::exception& e) {
        errors[m] = e.what();
      }
    });
    for (std::size_t m = 0; m < n_models; ++m) {
      if (!errors[m].empty()) throw DivergenceError("drift: " + report.models[m] + " failed: " + errors[m]);
    }
  }
  return report;
}

std::vector<GradcheckEntry> run_gradcheck(const NetworkConfig& net, const GradcheckOptions& opts) {
  net.validate();
  require(opts.batch_size > 0, "gradcheck: batch_size must be positive");
  FunnelSpec spec;
  spec.dense_dim = net.dense_input_dim;
  spec.n_categorical = net.n_categorical;
  spec.vocab_size = net.vocab_size;
  spec.calibration_sample = 2000;
  // Higher base rates so small batches hold both labels on both heads.
  spec.base_click_rate_target = 0.5;
  spec.base_conv_rate_target = 0.5;
  spec.seed = opts.seed;
  const GroundTruth gt(synthesize_funnel(spec));
  Dataset ds = generate_day(gt, 0, opts.batch_size, opts.seed);
  // Mixed calibration weights exercise the weighting path.
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.examples[i].click == 0 && i % 2 == 0) ds.examples[i].weight = 10.0;
  }
  const Batch batch = make_batch(ds);
  std::vector<GradcheckEntry> out;
  for (const auto& traits : kModelTable) {
    Model model = Model::build(traits.design, net, opts.seed);
    auto params = model.parameters();
    GradCheckOptions gc;
    gc.corrupt_analytic = opts.inject_fault;
    GradCheckReport r = check_gradients<double>(
        params, [&](Tape& tape) { return model.loss(tape, batch).total; }, gc);
    out.push_back({std::string(traits.name), r});
  }
  return out;
}

namespace {

double brute_force_average_precision(const std::vector<double>& p, const std::vector<int>& y,
                                     const std::vector<double>& w) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 1) continue;
    double above = 0.0, above_pos = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] > p[i] || (p[j] == p[i] && j <= i)) {
        above += w[j];
        if (y[j] == 1) above_pos += w[j];
      }
    }
    num += w[i] * above_pos / above;
    den += w[i];
  }
  return num / den;
}

}  // namespace

std::vector<SelftestResult> run_selftest() {
  std::vector<SelftestResult> out;
  auto check = [&out](std::string name, bool ok, std::string detail = {}) {
    out.push_back({std::move(name), ok, std::move(detail)});
  };
  check("sigmoid(0) = 0.5", sigmoid(0.0) == 0.5);
  check("sigmoid(ln 3) = 0.75", std::abs(sigmoid(std::log(3.0)) - 0.75) < 1e-15);
  check("sigmoid(+-1000) finite", std::isfinite(sigmoid(1000.0)) && sigmoid(1000.0) <= 1.0 &&
                                      sigmoid(-1000.0) >= 0.0);
  check("bce(0.9, 0, 10) = 10 ln 10",
        std::abs(weighted_bce(0.9, 0, 10.0) - 10.0 * std::log(10.0)) < 1e-9);

  Rng rng(12345);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(unit(rng) * 60);
    std::vector<double> p(n), w(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = std::round(unit(rng) * 10) / 10;
      y[i] = i == 0 ? 1 : (i == 1 ? 0 : (unit(rng) < 0.3 ? 1 : 0));
      w[i] = 0.5 + unit(rng) * 3;
    }
    worst = std::max(worst, std::abs(pr_auc(p, y, w) - brute_force_average_precision(p, y, w)));
  }
  check("pr_auc matches brute-force enumeration", worst < 1e-9, "max diff " + fmt(worst));

  const std::vector<double> a{1.1, 2.3, 2.9, 4.2}, b{0.4, 5.0, 1.7};
  check("t-test symmetric", two_sided_t_test(a, b) == two_sided_t_test(b, a));
  check("t-test identical samples p = 1", two_sided_t_test(a, a) == 1.0);

  NetworkConfig small;
  small.dense_input_dim = 3;
  small.n_categorical = 1;
  small.vocab_size = 4;
  small.embedding_dim = 2;
  small.shared_layer_dims = {5, 4};
  small.head_layer_dims = {3, 1};
  bool grads_ok = true;
  for (const auto& e : run_gradcheck(small)) grads_ok = grads_ok && e.report.passed();
  check("gradients match finite differences (small net)", grads_ok);

  FunnelSpec spec;
  spec.calibration_sample = 20000;
  const GroundTruth gt(synthesize_funnel(spec));
  const Dataset ds = generate_day(gt, 0, 20000, 9);
  double negatives = 0.0, weighted = 0.0;
  for (const auto& e : ds.examples) negatives += e.click == 0;
  for (int t = 0; t < 20; ++t) {
    for (const auto& e : downsample_negatives(ds, 10.0, 100 + t).examples) {
      if (e.click == 0) weighted += e.weight;
    }
  }
  weighted /= 20.0;
  check("downsampling preserves weighted negative count", std::abs(weighted / negatives - 1.0) < 0.02,
        "ratio " + fmt(weighted / negatives));
  bool implication = true;
  for (const auto& e : ds.examples) implication = implication && (e.conversion == 0 || e.click == 1);
  check("conversion implies click", implication);
  return out;
}

void write_ablation_csv(const AblationReport& report, std::ostream& out) {
  write_header(out, report, "ablation");
  out << "model,seed,joint_ce,joint_pr_auc,calibration_ratio,ctr_ce,norm_perf\n";
  for (const RunRecord& r : report.runs) {
    out << design_name(r.model) << ',' << r.seed << ',';
    if (!r.ok) {
      out << "failed,failed,failed,failed,failed\n";
      continue;
    }
    out << fmt(r.metrics.joint_ce) << ',' << fmt(r.metrics.joint_pr_auc) << ','
        << fmt(r.metrics.calibration_ratio) << ',' << (r.metrics.ctr_ce ? fmt(*r.metrics.ctr_ce) : "")
        << ',' << (report.stats_valid ? fmt(r.norm_perf) : "") << '\n';
  }
}

void write_stats_csv(const AblationReport& report, std::ostream& out) {
  write_header(out, report, "ablation statistics");
  out << "# better_than: p < " << fmt(kSignificanceLevel)
      << " (two-sided Welch t-test on per-seed norm_perf) and higher mean\n";
  out << "model,mean_norm_perf,sem,better_than";
  for (const auto& m : report.models) out << ",p_" << m;
  out << '\n';
  if (!report.stats_valid) return;
  const ComparisonStats& s = report.stats;
  for (std::size_t i = 0; i < s.models.size(); ++i) {
    std::string better;
    for (const auto& b : s.better_than[i]) better += (better.empty() ? "" : ";") + b;
    out << s.models[i] << ',' << fmt(s.mean_norm_perf[i]) << ',' << fmt(s.sem[i]) << ',' << better;
    for (std::size_t j = 0; j < s.models.size(); ++j) {
      out << ',' << fmt(s.p_values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    out << '\n';
  }
}

void write_ablation_json(const AblationReport& report, std::ostream& out) {
  json j;
  j["performance_formula"] = kPerformanceFormula;
  j["config_fingerprint"] = report.config_fingerprint;
  j["runs"] = json::array();
  for (const RunRecord& r : report.runs) {
    json row{{"model", std::string(design_name(r.model))}, {"seed", r.seed}, {"ok", r.ok}};
    if (r.ok) {
      row["joint_ce"] = r.metrics.joint_ce;
      row["joint_pr_auc"] = r.metrics.joint_pr_auc;
      row["calibration_ratio"] = r.metrics.calibration_ratio;
      row["ctr_ce"] = r.metrics.ctr_ce ? json(*r.metrics.ctr_ce) : json(nullptr);
      row["norm_perf"] = report.stats_valid ? json(r.norm_perf) : json(nullptr);
      if (r.metrics.ctr_calibration_ratio) {
        row["ctr_calibration_ratio"] = *r.metrics.ctr_calibration_ratio;
      }
      if (r.metrics.consistency_violation_rate) {
        row["consistency_violation_rate"] = *r.metrics.consistency_violation_rate;
      }
    } else {
      row["error"] = r.error;
    }
    j["runs"].push_back(row);
  }
  if (report.stats_valid) {
    const ComparisonStats& s = report.stats;
    json stats = json::array();
    for (std::size_t i = 0; i < s.models.size(); ++i) {
      json p = json::object();
      for (std::size_t k = 0; k < s.models.size(); ++k) {
        p[s.models[k]] = s.p_values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      }
      stats.push_back({{"model", s.models[i]},
                       {"mean_norm_perf", s.mean_norm_perf[i]},
                       {"sem", s.sem[i]},
                       {"better_than", s.better_than[i]},
                       {"p_values", p}});
    }
    j["stats"] = stats;
  }
  out << j.dump(2) << '\n';
}

std::vector<ParsedAblationRow> parse_ablation_csv(std::istream& in) {
  std::vector<ParsedAblationRow> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      require(line == "model,seed,joint_ce,joint_pr_auc,calibration_ratio,ctr_ce,norm_perf",
              "parse_ablation_csv: unexpected header");
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() == 6) cells.emplace_back();
    require(cells.size() == 7, "parse_ablation_csv: expected 7 columns");
    if (cells[2] == "failed") continue;
    ParsedAblationRow r;
    r.model = cells[0];
    r.seed = std::stoi(cells[1]);
    r.joint_ce = std::stod(cells[2]);
    r.norm_perf = cells[6].empty() ? 0.0 : std::stod(cells[6]);
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

}  // namespace

std::vector<std::string> emit_report(const AblationReport& report, ReportFormat format,
                                     const std::string& dir) {
  ensure_dir(dir);
  std::vector<std::string> paths;
  auto write = [&paths](const std::string& path, auto&& fn) {
    std::ofstream out = open_output(path);
    fn(out);
    out.flush();
    if (!out) throw IoError("write failed: " + path);
    paths.push_back(path);
  };
  const std::filesystem::path base(dir);
  if (format == ReportFormat::kCsv) {
    write((base / "ablation.csv").string(), [&](std::ostream& o) { write_ablation_csv(report, o); });
    write((base / "ablation_stats.csv").string(), [&](std::ostream& o) { write_stats_csv(report, o); });
  } else {
    write((base / "ablation.json").string(), [&](std::ostream& o) { write_ablation_json(report, o); });
  }
  return paths;
}

std::vector<std::string> emit_drift_report(const DriftReport& report, const std::string& dir) {
  ensure_dir(dir);
  const std::filesystem::path base(dir);
  const std::string rows_path = (base / "drift.csv").string();
  const std::string means_path = (base / "drift_means.csv").string();
  {
    std::ofstream out = open_output(rows_path);
    out << "# esmm-lab drift decay\n# config_fingerprint=" << report.config_fingerprint << "\n";
    out << "model,seed,offset_day,joint_ce\n";
    for (std::size_t m = 0; m < report.models.size(); ++m) {
      for (std::size_t s = 0; s < report.ce[m].size(); ++s) {
        for (std::size_t k = 0; k < report.offsets.size(); ++k) {
          out << report.models[m] << ',' << s << ',' << report.offsets[k] << ','
              << fmt(report.ce[m][s][k]) << '\n';
        }
      }
    }
    if (!out) throw IoError("write failed: " + rows_path);
  }
  {
    std::ofstream out = open_output(means_path);
    out << "# esmm-lab drift decay means\n# config_fingerprint=" << report.config_fingerprint << "\n";
    out << "model";
    for (int n : report.offsets) out << ",mean_day" << n << ",sem_day" << n;
    out << '\n';
    for (std::size_t m = 0; m < report.models.size(); ++m) {
      out << report.models[m];
      for (std::size_t k = 0; k < report.offsets.size(); ++k) {
        out << ',' << fmt(report.mean_ce(m, k)) << ',' << fmt(report.sem_ce(m, k));
      }
      out << '\n';
    }
    if (!out) throw IoError("write failed: " + means_path);
  }
  return {rows_path, means_path};
}

}  // namespace esmm
