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

// The six click/conversion model designs as one family over three
// characteristics: shared parameters, entire-space training and weighted CVR.
//
//   IP          two disjoint towers; CTR on all impressions, CVR on clicks;
//               joint = ctr * cvr.
//   IPSP        shared trunk, two heads, IP losses.
//   ESSP-Split  shared trunk; independent CTR and joint heads.
//   ESMM        shared trunk; joint = sigmoid(ctr) * sigmoid(implicit cvr).
//   ESMM-NS     ESMM losses over two disjoint towers.
//   ESP         one tower, one joint head, no CTR prediction.

#ifndef ESMM_MODELS_HPP_
#define ESMM_MODELS_HPP_

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "esmm/autodiff.hpp"
#include "esmm/funnel_data.hpp"
#include "esmm/random.hpp"

namespace esmm {

enum class Design { kIP, kESMM, kESMM_NS, kESSPSplit, kIPSP, kESP };

struct ModelCharacteristics {
  Design design;
  std::string_view name;
  bool shared_params;
  bool entire_space;
  bool weighted_cvr;
};

inline constexpr std::array<ModelCharacteristics, 6> kModelTable{{
    {Design::kIP, "IP", false, false, false},
    {Design::kESMM, "ESMM", true, true, true},
    {Design::kESMM_NS, "ESMM-NS", false, true, true},
    {Design::kESSPSplit, "ESSP-Split", true, true, false},
    {Design::kIPSP, "IPSP", true, false, false},
    {Design::kESP, "ESP", false, true, false},
}};

const ModelCharacteristics& characteristics(Design design);
std::string_view design_name(Design design);
// Throws ContractViolation for unknown names.
Design parse_design(std::string_view name);

struct NetworkConfig {
  int dense_input_dim = 16;
  int n_categorical = 2;
  int vocab_size = 2000;
  int embedding_dim = 16;
  std::array<int, 2> shared_layer_dims{64, 32};
  // Hidden width, then the single output logit.
  std::array<int, 2> head_layer_dims{8, 1};

  void validate() const;
  int tower_input_dim() const { return dense_input_dim + n_categorical * embedding_dim; }
};

// A mini-batch in feature-major layout: column j is example j.
struct Batch {
  Eigen::MatrixXd dense;                     // dense_dim x B
  std::vector<std::vector<int>> categorical;  // one index list of length B per feature
  RowVector<double> clicks;
  RowVector<double> conversions;
  RowVector<double> weights;

  Eigen::Index size() const { return clicks.cols(); }
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices);
Batch make_batch(const Dataset& ds);

// Feature embeddings followed by the two trunk layers.
class Tower {
 public:
  Tower() = default;
  Tower(const std::string& name, const NetworkConfig& net, Rng& rng);

  Var forward(Tape& tape, const Batch& batch) const;
  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  std::vector<EmbeddingTable> embeddings_;
  std::array<DenseLayer, 2> layers_;
};

// Hidden layer plus a linear output producing one logit per example.
class Head {
 public:
  Head() = default;
  Head(const std::string& name, int in_dim, const NetworkConfig& net, Rng& rng);

  Var logit(Tape& tape, Var input) const;
  void collect(std::vector<Parameter*>& out);
  void collect(std::vector<const Parameter*>& out) const;

 private:
  DenseLayer hidden_;
  DenseLayer output_;
};

// A standalone single-task MLP, initialized exactly like IP's CTR branch.
class Mlp {
 public:
  Mlp(const NetworkConfig& net, std::uint64_t seed);

  Var probability(Tape& tape, const Batch& batch) const;
  std::vector<double> predict(const Dataset& ds) const;

 private:
  NetworkConfig net_;
  Tower tower_;
  Head head_;
};

struct HeadWeights {
  double ctr = 0.0;
  double cvr = 0.0;
};

// Per-example loss weights: regime weight times calibration weight.
HeadWeights loss_weights(const ModelCharacteristics& model, const Example& example);

enum class LossScope { kAll, kClickOnly, kConversionOnly };

struct Predictions {
  std::vector<double> joint;
  std::optional<std::vector<double>> ctr;
  // Conditional p(z | y = 1, x), where the design exposes it.
  std::optional<std::vector<double>> cvr;
};

class Model {
 public:
  static Model build(Design design, const NetworkConfig& net, std::uint64_t seed);

  struct Outputs {
    std::optional<Var> ctr;
    std::optional<Var> cvr;  // conditional, explicit or implicit
    Var joint;
  };

  struct Loss {
    Var total;
    std::optional<double> ctr;  // weighted-mean CE of the CTR head
    std::optional<double> cvr;  // weighted-mean CE of the conversion-side head
  };

  Outputs forward(Tape& tape, const Batch& batch) const;

  // Each head's weighted CE sum divided by that head's weight sum, then
  // added. A head whose weights are all zero is left off the tape.
  Loss loss(Tape& tape, const Batch& batch, LossScope scope = LossScope::kAll) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  // Parameters reachable only through the conversion-side head.
  std::vector<const Parameter*> conversion_exclusive_parameters() const;
  std::vector<const Parameter*> click_exclusive_parameters() const;
  std::size_t parameter_count() const;

  const ModelCharacteristics& characteristics() const { return *traits_; }
  Design design() const { return traits_->design; }
  const NetworkConfig& network() const { return net_; }
  bool has_ctr_head() const { return ctr_head_.has_value(); }
  bool has_cvr_output() const;
  bool two_towers() const { return towers_.size() == 2; }

  Predictions predict(const Dataset& ds, std::size_t batch_size = 4096) const;

 private:
  Model() = default;
  std::size_t conversion_tower() const { return towers_.size() == 2 ? 1 : 0; }

  const ModelCharacteristics* traits_ = nullptr;
  NetworkConfig net_;
  std::vector<Tower> towers_;
  std::optional<Head> ctr_head_;
  // Conditional CVR head (IP, IPSP, ESMM, ESMM-NS) or joint head (ESSP-Split, ESP).
  Head conversion_head_;
};

double predict_joint(const Model& model, const Example& x);
// Throws ContractViolation("no CTR head") for ESP.
double predict_ctr(const Model& model, const Example& x);
double predict_cvr(const Model& model, const Example& x);

// Flat text: magic line, design name, network config, then every parameter
// as `param <name> <rows> <cols>` followed by rows of decimal values.
void write_model(const Model& model, std::ostream& out);
Model read_model(std::istream& in);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace esmm

#endif  // ESMM_MODELS_HPP_
