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

#include "esmm/funnel_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "esmm/autodiff.hpp"
#include "esmm/errors.hpp"
#include "esmm/metrics.hpp"
#include "esmm/random.hpp"

namespace esmm {
namespace {

enum Stream : std::uint64_t {
  kWeightStream = 1,
  kCalibrationStream = 2,
  kDriftStream = 3,
  kDayStream = 4,
  kDownsampleStream = 5,
  kShuffleStream = 6,
};

void draw_features(Rng& rng, int dense_dim, int n_categorical, int vocab_size,
                   Eigen::VectorXd& dense, std::vector<int>& categorical) {
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> category(0, vocab_size - 1);
  dense.resize(dense_dim);
  for (int i = 0; i < dense_dim; ++i) dense(i) = normal(rng);
  categorical.resize(static_cast<std::size_t>(n_categorical));
  for (int& c : categorical) c = category(rng);
}

double categorical_sum(const Eigen::MatrixXd& offsets, std::span<const int> categorical) {
  double s = 0.0;
  for (std::size_t j = 0; j < categorical.size(); ++j) {
    s += offsets(static_cast<Eigen::Index>(j), categorical[j]);
  }
  return s;
}

template <typename F>
double bisect(F&& excess, double lo, double hi) {
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (excess(mid) > 0.0) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

void FunnelConfig::validate() const {
  require(dense_dim >= 0 && n_categorical >= 0, "funnel: dimensions must be non-negative");
  require(dense_dim + n_categorical > 0, "funnel: need at least one feature");
  require(vocab_size > 0, "funnel: vocab_size must be positive");
  require(click_weights.size() == dense_dim && conv_weights.size() == dense_dim,
          "funnel: weight vectors must have dense_dim entries");
  require(click_offsets.rows() == n_categorical && click_offsets.cols() == vocab_size &&
              conv_offsets.rows() == n_categorical && conv_offsets.cols() == vocab_size,
          "funnel: offsets must be n_categorical x vocab_size");
  require(drift_rate >= 0.0 && std::isfinite(drift_rate), "funnel: drift_rate must be >= 0");
  require(n_days > 0, "funnel: n_days must be positive");
  require(base_click_rate_target > 0.0 && base_click_rate_target < 1.0 &&
              base_conv_rate_target > 0.0 && base_conv_rate_target < 1.0,
          "funnel: base rate targets must lie in (0, 1)");
}

std::string FunnelConfig::fingerprint() const {
  Fnv1a h;
  h.update(std::int64_t{dense_dim});
  h.update(std::int64_t{n_categorical});
  h.update(std::int64_t{vocab_size});
  for (double w : click_weights) h.update(w);
  h.update(click_intercept);
  for (double w : conv_weights) h.update(w);
  h.update(conv_intercept);
  for (Eigen::Index i = 0; i < click_offsets.size(); ++i) h.update(click_offsets.data()[i]);
  for (Eigen::Index i = 0; i < conv_offsets.size(); ++i) h.update(conv_offsets.data()[i]);
  h.update(drift_rate);
  h.update(std::int64_t{n_days});
  h.update(base_click_rate_target);
  h.update(base_conv_rate_target);
  h.update(static_cast<std::int64_t>(drift_seed));
  return h.hex();
}

FunnelConfig synthesize_funnel(const FunnelSpec& spec) {
  require(spec.correlation >= -1.0 && spec.correlation <= 1.0,
          "funnel: correlation must lie in [-1, 1]");
  require(spec.calibration_sample > 0, "funnel: calibration_sample must be positive");
  require(spec.click_signal >= 0.0 && spec.conv_signal >= 0.0 && spec.categorical_signal >= 0.0,
          "funnel: signal scales must be non-negative");
  FunnelConfig cfg;
  cfg.dense_dim = spec.dense_dim;
  cfg.n_categorical = spec.n_categorical;
  cfg.vocab_size = spec.vocab_size;
  cfg.drift_rate = spec.drift_rate;
  cfg.n_days = spec.n_days;
  cfg.base_click_rate_target = spec.base_click_rate_target;
  cfg.base_conv_rate_target = spec.base_conv_rate_target;
  cfg.drift_seed = mix_seed({spec.seed, kDriftStream});
  require(spec.dense_dim >= 0 && spec.n_categorical >= 0 && spec.vocab_size > 0,
          "funnel: invalid dimensions");

  // Conversion weights = rho * click direction + sqrt(1 - rho^2) * fresh noise.
  Rng rng = make_rng({spec.seed, kWeightStream});
  std::normal_distribution<double> normal;
  const double rho = spec.correlation;
  const double rest = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const double dense_scale = spec.dense_dim > 0 ? 1.0 / std::sqrt(double(spec.dense_dim)) : 0.0;
  cfg.click_weights.resize(spec.dense_dim);
  cfg.conv_weights.resize(spec.dense_dim);
  for (int i = 0; i < spec.dense_dim; ++i) {
    const double shared = normal(rng);
    const double own = normal(rng);
    cfg.click_weights(i) = spec.click_signal * dense_scale * shared;
    cfg.conv_weights(i) = spec.conv_signal * dense_scale * (rho * shared + rest * own);
  }
  cfg.click_offsets.resize(spec.n_categorical, spec.vocab_size);
  cfg.conv_offsets.resize(spec.n_categorical, spec.vocab_size);
  for (int j = 0; j < spec.n_categorical; ++j) {
    for (int v = 0; v < spec.vocab_size; ++v) {
      const double shared = normal(rng);
      const double own = normal(rng);
      cfg.click_offsets(j, v) = spec.categorical_signal * shared;
      cfg.conv_offsets(j, v) = spec.categorical_signal * (rho * shared + rest * own);
    }
  }

  // Intercepts are solved against day-0 parameters on a fixed sample.
  Rng sample_rng = make_rng({spec.seed, kCalibrationStream});
  const auto n = static_cast<std::size_t>(spec.calibration_sample);
  std::vector<double> click_part(n), conv_part(n);
  Eigen::VectorXd dense;
  std::vector<int> cats;
  for (std::size_t i = 0; i < n; ++i) {
    draw_features(sample_rng, spec.dense_dim, spec.n_categorical, spec.vocab_size, dense, cats);
    click_part[i] = cfg.click_weights.dot(dense) + categorical_sum(cfg.click_offsets, cats);
    conv_part[i] = cfg.conv_weights.dot(dense) + categorical_sum(cfg.conv_offsets, cats);
  }
  cfg.click_intercept = bisect(
      [&](double b) {
        double s = 0.0;
        for (double c : click_part) s += sigmoid(b + c);
        return s / double(n) - spec.base_click_rate_target;
      },
      -40.0, 40.0);
  std::vector<double> ctr(n);
  double ctr_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ctr[i] = sigmoid(cfg.click_intercept + click_part[i]);
    ctr_sum += ctr[i];
  }
  cfg.conv_intercept = bisect(
      [&](double b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += ctr[i] * sigmoid(b + conv_part[i]);
        return s / ctr_sum - spec.base_conv_rate_target;
      },
      -40.0, 40.0);
  cfg.validate();
  return cfg;
}

std::string Dataset::fingerprint() const {
  Fnv1a h;
  h.update(provenance.config_fingerprint);
  h.update(static_cast<std::int64_t>(provenance.seed));
  h.update(provenance.downsample_factor);
  for (const Example& e : examples) {
    for (double v : e.dense) h.update(v);
    for (int c : e.categorical) h.update(std::int64_t{c});
    h.update(std::int64_t{e.click});
    h.update(std::int64_t{e.conversion});
    h.update(e.weight);
    h.update(std::int64_t{e.day});
  }
  return h.hex();
}

GroundTruth::GroundTruth(FunnelConfig config) : config_(std::move(config)) {
  config_.validate();
  fingerprint_ = config_.fingerprint();
  // Day t parameters = day 0 parameters + drift_rate * (sum of t standard
  // normal perturbations), a deterministic random walk.
  DayParams current{config_.click_weights, config_.conv_weights, config_.click_offsets,
                    config_.conv_offsets};
  days_.reserve(static_cast<std::size_t>(config_.n_days));
  days_.push_back(current);
  for (int day = 1; day < config_.n_days; ++day) {
    if (config_.drift_rate > 0.0) {
      Rng rng = make_rng({config_.drift_seed, static_cast<std::uint64_t>(day)});
      std::normal_distribution<double> step(0.0, config_.drift_rate);
      for (Eigen::Index i = 0; i < current.click_weights.size(); ++i) current.click_weights(i) += step(rng);
      for (Eigen::Index i = 0; i < current.conv_weights.size(); ++i) current.conv_weights(i) += step(rng);
      for (Eigen::Index i = 0; i < current.click_offsets.size(); ++i) current.click_offsets.data()[i] += step(rng);
      for (Eigen::Index i = 0; i < current.conv_offsets.size(); ++i) current.conv_offsets.data()[i] += step(rng);
    }
    days_.push_back(current);
  }
}

const GroundTruth::DayParams& GroundTruth::day_params(int day) const {
  require(day >= 0 && day < config_.n_days, "ground truth: day outside [0, n_days)");
  return days_[static_cast<std::size_t>(day)];
}

void GroundTruth::check_features(const Eigen::VectorXd& dense, std::span<const int> categorical) const {
  require(dense.size() == config_.dense_dim, "ground truth: dense feature dimension mismatch");
  require(categorical.size() == static_cast<std::size_t>(config_.n_categorical),
          "ground truth: categorical feature count mismatch");
  for (int c : categorical) {
    require(c >= 0 && c < config_.vocab_size, "ground truth: categorical index out of range");
  }
}

double GroundTruth::click_logit(const Eigen::VectorXd& dense, std::span<const int> categorical,
                                int day) const {
  check_features(dense, categorical);
  const DayParams& p = day_params(day);
  return config_.click_intercept + p.click_weights.dot(dense) +
         categorical_sum(p.click_offsets, categorical);
}

double GroundTruth::conv_logit(const Eigen::VectorXd& dense, std::span<const int> categorical,
                               int day) const {
  check_features(dense, categorical);
  const DayParams& p = day_params(day);
  return config_.conv_intercept + p.conv_weights.dot(dense) +
         categorical_sum(p.conv_offsets, categorical);
}

double true_ctr(const GroundTruth& gt, const Eigen::VectorXd& dense, std::span<const int> categorical,
                int day) {
  return sigmoid(gt.click_logit(dense, categorical, day));
}

double true_cvr_given_click(const GroundTruth& gt, const Eigen::VectorXd& dense,
                            std::span<const int> categorical, int day) {
  return sigmoid(gt.conv_logit(dense, categorical, day));
}

double true_joint(const GroundTruth& gt, const Eigen::VectorXd& dense, std::span<const int> categorical,
                  int day) {
  return true_ctr(gt, dense, categorical, day) * true_cvr_given_click(gt, dense, categorical, day);
}

Dataset generate_day(const GroundTruth& gt, int day, std::size_t n, std::uint64_t seed) {
  const FunnelConfig& cfg = gt.config();
  require(day >= 0 && day < cfg.n_days, "generate_day: day outside [0, n_days)");
  Dataset ds;
  ds.provenance = {gt.fingerprint(), seed, 1.0};
  ds.examples.resize(n);
  Rng rng = make_rng({seed, kDayStream, static_cast<std::uint64_t>(day)});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Example& e : ds.examples) {
    draw_features(rng, cfg.dense_dim, cfg.n_categorical, cfg.vocab_size, e.dense, e.categorical);
    e.day = day;
    e.weight = 1.0;
    const double u_click = unit(rng);
    const double u_conv = unit(rng);
    e.click = u_click < true_ctr(gt, e.dense, e.categorical, day) ? 1 : 0;
    e.conversion =
        (e.click == 1 && u_conv < true_cvr_given_click(gt, e.dense, e.categorical, day)) ? 1 : 0;
  }
  return ds;
}

Dataset generate_days(const GroundTruth& gt, int first_day, int n_days, std::size_t n_per_day,
                      std::uint64_t seed) {
  require(n_days > 0, "generate_days: n_days must be positive");
  Dataset out;
  out.provenance = {gt.fingerprint(), seed, 1.0};
  out.examples.reserve(n_per_day * static_cast<std::size_t>(n_days));
  for (int d = first_day; d < first_day + n_days; ++d) {
    Dataset day = generate_day(gt, d, n_per_day, seed);
    std::move(day.examples.begin(), day.examples.end(), std::back_inserter(out.examples));
  }
  return out;
}

Dataset downsample_negatives(const Dataset& ds, double factor, std::uint64_t seed) {
  require(factor >= 1.0 && std::isfinite(factor), "downsample_negatives: factor must be >= 1");
  Dataset out;
  out.provenance = ds.provenance;
  out.provenance.downsample_factor *= factor;
  if (factor == 1.0) {
    out.examples = ds.examples;
    return out;
  }
  Rng rng = make_rng({seed, kDownsampleStream});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep = 1.0 / factor;
  for (const Example& e : ds.examples) {
    if (e.click == 1) {
      out.examples.push_back(e);
    } else if (unit(rng) < keep) {
      out.examples.push_back(e);
      out.examples.back().weight *= factor;
    }
  }
  return out;
}

Dataset shuffle(const Dataset& ds, std::uint64_t seed) {
  Dataset out = ds;
  Rng rng = make_rng({seed, kShuffleStream});
  // Fisher-Yates with an explicit index draw so the permutation is
  // independent of the standard library's shuffle implementation.
  for (std::size_t i = out.examples.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(out.examples[i - 1], out.examples[pick(rng)]);
  }
  return out;
}

Dataset clicked_subset(const Dataset& ds) {
  Dataset out;
  out.provenance = ds.provenance;
  for (const Example& e : ds.examples) {
    if (e.click == 1) out.examples.push_back(e);
  }
  return out;
}

double bayes_ce(const GroundTruth& gt, const Dataset& ds, Target target) {
  require(ds.provenance.config_fingerprint == gt.fingerprint(),
          "bayes_ce: dataset was generated from a different funnel config");
  std::vector<double> preds, weights;
  std::vector<int> labels;
  for (const Example& e : ds.examples) {
    switch (target) {
      case Target::kJoint:
        preds.push_back(true_joint(gt, e));
        labels.push_back(e.conversion);
        break;
      case Target::kCtr:
        preds.push_back(true_ctr(gt, e));
        labels.push_back(e.click);
        break;
      case Target::kCvrGivenClick:
        if (e.click != 1) continue;
        preds.push_back(true_cvr_given_click(gt, e));
        labels.push_back(e.conversion);
        break;
    }
    weights.push_back(e.weight);
  }
  return weighted_ce(preds, labels, weights);
}

void write_dataset(const Dataset& ds, std::ostream& out) {
  const Example* first = ds.empty() ? nullptr : &ds.examples.front();
  const Eigen::Index dense_dim = first ? first->dense.size() : 0;
  const std::size_t n_cat = first ? first->categorical.size() : 0;
  out << "# fingerprint=" << ds.provenance.config_fingerprint << " seed=" << ds.provenance.seed;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", ds.provenance.downsample_factor);
  out << " downsample_factor=" << buf << " dense_dim=" << dense_dim << " n_categorical=" << n_cat
      << "\n";
  std::string header;
  for (Eigen::Index i = 0; i < dense_dim; ++i) header += "dense_" + std::to_string(i) + ",";
  for (std::size_t j = 0; j < n_cat; ++j) header += "cat_" + std::to_string(j) + ",";
  out << header << "click,conversion,weight,day\n";
  for (const Example& e : ds.examples) {
    require(e.dense.size() == dense_dim && e.categorical.size() == n_cat,
            "write_dataset: inconsistent feature dimensions");
    for (double v : e.dense) {
      std::snprintf(buf, sizeof buf, "%.17g,", v);
      out << buf;
    }
    for (int c : e.categorical) out << c << ',';
    std::snprintf(buf, sizeof buf, "%.17g", e.weight);
    out << e.click << ',' << e.conversion << ',' << buf << ',' << e.day << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.rfind("# ", 0) == 0,
          "read_dataset: missing provenance line");
  long dense_dim = -1, n_cat = -1;
  {
    std::istringstream meta(line.substr(2));
    std::string kv;
    while (meta >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "fingerprint") ds.provenance.config_fingerprint = val;
      else if (key == "seed") ds.provenance.seed = std::stoull(val);
      else if (key == "downsample_factor") ds.provenance.downsample_factor = std::stod(val);
      else if (key == "dense_dim") dense_dim = std::stol(val);
      else if (key == "n_categorical") n_cat = std::stol(val);
    }
  }
  require(dense_dim >= 0 && n_cat >= 0, "read_dataset: provenance line lacks dimensions");
  require(static_cast<bool>(std::getline(in, line)), "read_dataset: missing header row");
  const long n_cols = dense_dim + n_cat + 4;
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(static_cast<long>(cells.size()) == n_cols,
            "read_dataset: wrong column count on line " + std::to_string(line_no));
    Example e;
    e.dense.resize(dense_dim);
    std::size_t k = 0;
    for (long i = 0; i < dense_dim; ++i) e.dense(i) = std::stod(cells[k++]);
    for (long j = 0; j < n_cat; ++j) e.categorical.push_back(std::stoi(cells[k++]));
    e.click = std::stoi(cells[k++]);
    e.conversion = std::stoi(cells[k++]);
    e.weight = std::stod(cells[k++]);
    e.day = std::stoi(cells[k++]);
    require((e.click == 0 || e.click == 1) && (e.conversion == 0 || e.conversion == 1) &&
                (e.conversion == 0 || e.click == 1),
            "read_dataset: invalid labels on line " + std::to_string(line_no));
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_dataset(ds, out);
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  return read_dataset(in);
}

}  // namespace esmm
