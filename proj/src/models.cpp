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

#include "esmm/models.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "esmm/errors.hpp"

namespace esmm {
namespace {

constexpr std::string_view kModelMagic = "esmm-model v1";

}  // namespace

const ModelCharacteristics& characteristics(Design design) {
  for (const auto& c : kModelTable) {
    if (c.design == design) return c;
  }
  throw ContractViolation("unknown model design");
}

std::string_view design_name(Design design) { return characteristics(design).name; }

Design parse_design(std::string_view name) {
  for (const auto& c : kModelTable) {
    if (c.name == name) return c.design;
  }
  throw ContractViolation("unknown model design: " + std::string(name));
}

void NetworkConfig::validate() const {
  require(dense_input_dim >= 0 && n_categorical >= 0, "network: dimensions must be non-negative");
  require(n_categorical == 0 || (vocab_size > 0 && embedding_dim > 0),
          "network: embeddings need positive vocab_size and embedding_dim");
  require(tower_input_dim() > 0, "network: no input features");
  require(shared_layer_dims[0] > 0 && shared_layer_dims[1] > 0,
          "network: shared layer widths must be positive");
  require(head_layer_dims[0] > 0, "network: head hidden width must be positive");
  require(head_layer_dims[1] == 1, "network: head output width must be 1");
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(indices.size());
  const Eigen::Index dense_dim = ds.empty() ? 0 : ds.examples.front().dense.size();
  const std::size_t n_cat = ds.empty() ? 0 : ds.examples.front().categorical.size();
  b.dense.resize(dense_dim, n);
  b.categorical.assign(n_cat, std::vector<int>(indices.size()));
  b.clicks.resize(n);
  b.conversions.resize(n);
  b.weights.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Example& e = ds.examples[indices[static_cast<std::size_t>(j)]];
    require(e.dense.size() == dense_dim && e.categorical.size() == n_cat,
            "make_batch: inconsistent feature dimensions");
    b.dense.col(j) = e.dense;
    for (std::size_t k = 0; k < n_cat; ++k) b.categorical[k][static_cast<std::size_t>(j)] = e.categorical[k];
    b.clicks(j) = e.click;
    b.conversions(j) = e.conversion;
    b.weights(j) = e.weight;
  }
  return b;
}

Batch make_batch(const Dataset& ds) {
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(ds, all);
}

Tower::Tower(const std::string& name, const NetworkConfig& net, Rng& rng) {
  for (int k = 0; k < net.n_categorical; ++k) {
    embeddings_.emplace_back(name + ".emb" + std::to_string(k), net.vocab_size, net.embedding_dim, rng);
  }
  layers_[0] = DenseLayer(name + ".layer0", net.tower_input_dim(), net.shared_layer_dims[0], rng);
  layers_[1] = DenseLayer(name + ".layer1", net.shared_layer_dims[0], net.shared_layer_dims[1], rng);
}

Var Tower::forward(Tape& tape, const Batch& batch) const {
  require(batch.categorical.size() == embeddings_.size(),
          "model: categorical feature count differs from network config");
  require(batch.dense.rows() + static_cast<Eigen::Index>(embeddings_.size()) *
                                   (embeddings_.empty() ? 0 : embeddings_.front().dim()) ==
              layers_[0].in_dim(),
          "model: dense feature dimension differs from network config");
  std::vector<Var> parts;
  if (batch.dense.rows() > 0) parts.push_back(tape.constant(batch.dense));
  for (std::size_t k = 0; k < embeddings_.size(); ++k) {
    parts.push_back(lookup(tape, embeddings_[k], batch.categorical[k]));
  }
  Var x = parts.size() == 1 ? parts.front() : vstack<double>(parts);
  x = relu(dense_forward(tape, layers_[0], x));
  return relu(dense_forward(tape, layers_[1], x));
}

void Tower::collect(std::vector<Parameter*>& out) {
  for (auto& e : embeddings_) out.push_back(&e.rows());
  for (auto& l : layers_) {
    out.push_back(&l.weights());
    out.push_back(&l.biases());
  }
}

void Tower::collect(std::vector<const Parameter*>& out) const {
  for (const auto& e : embeddings_) out.push_back(&e.rows());
  for (const auto& l : layers_) {
    out.push_back(&l.weights());
    out.push_back(&l.biases());
  }
}

Head::Head(const std::string& name, int in_dim, const NetworkConfig& net, Rng& rng)
    : hidden_(name + ".hidden", in_dim, net.head_layer_dims[0], rng),
      output_(name + ".output", net.head_layer_dims[0], net.head_layer_dims[1], rng) {}

Var Head::logit(Tape& tape, Var input) const {
  return dense_forward(tape, output_, relu(dense_forward(tape, hidden_, input)));
}

void Head::collect(std::vector<Parameter*>& out) {
  for (DenseLayer* l : {&hidden_, &output_}) {
    out.push_back(&l->weights());
    out.push_back(&l->biases());
  }
}

void Head::collect(std::vector<const Parameter*>& out) const {
  for (const DenseLayer* l : {&hidden_, &output_}) {
    out.push_back(&l->weights());
    out.push_back(&l->biases());
  }
}

Mlp::Mlp(const NetworkConfig& net, std::uint64_t seed) : net_(net) {
  net_.validate();
  Rng rng(seed);
  tower_ = Tower("tower0", net_, rng);
  head_ = Head("ctr_head", net_.shared_layer_dims[1], net_, rng);
}

Var Mlp::probability(Tape& tape, const Batch& batch) const {
  return sigmoid(head_.logit(tape, tower_.forward(tape, batch)));
}

std::vector<double> Mlp::predict(const Dataset& ds) const {
  Tape tape;
  Var p = probability(tape, make_batch(ds));
  return {p.value().data(), p.value().data() + p.value().size()};
}

HeadWeights loss_weights(const ModelCharacteristics& model, const Example& example) {
  const double w = example.weight;
  switch (model.design) {
    case Design::kESMM:
    case Design::kESMM_NS:
    case Design::kESSPSplit:
      return {w, w};
    case Design::kIP:
    case Design::kIPSP:
      return {w, example.click == 1 ? w : 0.0};
    case Design::kESP:
      return {0.0, w};
  }
  return {};
}

Model Model::build(Design design, const NetworkConfig& net, std::uint64_t seed) {
  net.validate();
  Model m;
  m.traits_ = &esmm::characteristics(design);
  m.net_ = net;
  Rng rng(seed);
  const int trunk_out = net.shared_layer_dims[1];
  // Construction order fixes the RNG stream each parameter draws from.
  m.towers_.emplace_back("tower0", net, rng);
  if (design != Design::kESP) m.ctr_head_.emplace("ctr_head", trunk_out, net, rng);
  if (design == Design::kIP || design == Design::kESMM_NS) m.towers_.emplace_back("tower1", net, rng);
  m.conversion_head_ = Head("cvr_head", trunk_out, net, rng);
  return m;
}

bool Model::has_cvr_output() const {
  return traits_->design != Design::kESSPSplit && traits_->design != Design::kESP;
}

Model::Outputs Model::forward(Tape& tape, const Batch& batch) const {
  std::vector<Var> trunk;
  for (const Tower& t : towers_) trunk.push_back(t.forward(tape, batch));
  Outputs out;
  if (ctr_head_) out.ctr = sigmoid(ctr_head_->logit(tape, trunk[0]));
  Var conv = sigmoid(conversion_head_.logit(tape, trunk[conversion_tower()]));
  if (has_cvr_output()) {
    out.cvr = conv;
    // IP/IPSP combine after training; ESMM variants train through the product.
    out.joint = mul(*out.ctr, conv);
  } else {
    out.joint = conv;
  }
  return out;
}

Model::Loss Model::loss(Tape& tape, const Batch& batch, LossScope scope) const {
  const Eigen::Index n = batch.size();
  require(n > 0, "loss: empty batch");
  RowVector<double> ctr_w(n), cvr_w(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Example e;
    e.click = static_cast<int>(batch.clicks(j));
    e.weight = batch.weights(j);
    const HeadWeights hw = loss_weights(*traits_, e);
    ctr_w(j) = hw.ctr;
    cvr_w(j) = hw.cvr;
  }
  if (scope == LossScope::kConversionOnly) ctr_w.setZero();
  if (scope == LossScope::kClickOnly) cvr_w.setZero();

  const double ctr_total = ctr_w.sum();
  const double cvr_total = cvr_w.sum();
  const Outputs out = forward(tape, batch);
  std::optional<Var> total;
  Loss result;
  if (ctr_total > 0.0 && out.ctr) {
    Var l = scale(weighted_bce(*out.ctr, batch.clicks, ctr_w), 1.0 / ctr_total);
    result.ctr = l.value()(0, 0);
    total = l;
  }
  if (cvr_total > 0.0) {
    // Entire-space designs score the joint event on every impression; IP and
    // IPSP score the conditional head on clicked impressions only.
    Var pred = traits_->entire_space ? out.joint : *out.cvr;
    Var l = scale(weighted_bce(pred, batch.conversions, cvr_w), 1.0 / cvr_total);
    result.cvr = l.value()(0, 0);
    total = total ? add(*total, l) : l;
  }
  require(total.has_value(), "loss: every head has zero weight in this batch");
  result.total = *total;
  return result;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  towers_[0].collect(out);
  if (ctr_head_) ctr_head_->collect(out);
  if (towers_.size() == 2) towers_[1].collect(out);
  conversion_head_.collect(out);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  towers_[0].collect(out);
  if (ctr_head_) ctr_head_->collect(out);
  if (towers_.size() == 2) towers_[1].collect(out);
  conversion_head_.collect(out);
  return out;
}

std::vector<const Parameter*> Model::conversion_exclusive_parameters() const {
  std::vector<const Parameter*> out;
  if (towers_.size() == 2) towers_[1].collect(out);
  conversion_head_.collect(out);
  if (!ctr_head_) towers_[0].collect(out);
  return out;
}

std::vector<const Parameter*> Model::click_exclusive_parameters() const {
  std::vector<const Parameter*> out;
  if (!ctr_head_) return out;
  ctr_head_->collect(out);
  if (towers_.size() == 2) towers_[0].collect(out);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Predictions Model::predict(const Dataset& ds, std::size_t batch_size) const {
  require(batch_size > 0, "predict: batch_size must be positive");
  Predictions out;
  out.joint.reserve(ds.size());
  if (ctr_head_) out.ctr.emplace().reserve(ds.size());
  if (has_cvr_output()) out.cvr.emplace().reserve(ds.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    const Outputs o = forward(tape, make_batch(ds, idx));
    auto append = [](std::vector<double>& dst, const Var& v) {
      dst.insert(dst.end(), v.value().data(), v.value().data() + v.value().size());
    };
    append(out.joint, o.joint);
    if (o.ctr) append(*out.ctr, *o.ctr);
    if (o.cvr) append(*out.cvr, *o.cvr);
  }
  return out;
}

namespace {

Dataset single(const Example& x) {
  Dataset ds;
  ds.examples.push_back(x);
  return ds;
}

}  // namespace

double predict_joint(const Model& model, const Example& x) { return model.predict(single(x)).joint[0]; }

double predict_ctr(const Model& model, const Example& x) {
  if (!model.has_ctr_head()) throw ContractViolation("no CTR head");
  return (*model.predict(single(x)).ctr)[0];
}

double predict_cvr(const Model& model, const Example& x) {
  if (!model.has_cvr_output()) throw ContractViolation("no conditional CVR output");
  return (*model.predict(single(x)).cvr)[0];
}

void write_model(const Model& model, std::ostream& out) {
  const NetworkConfig& n = model.network();
  out << kModelMagic << "\n";
  out << "design " << model.characteristics().name << "\n";
  out << "network " << n.dense_input_dim << ' ' << n.n_categorical << ' ' << n.vocab_size << ' '
      << n.embedding_dim << ' ' << n.shared_layer_dims[0] << ' ' << n.shared_layer_dims[1] << ' '
      << n.head_layer_dims[0] << ' ' << n.head_layer_dims[1] << "\n";
  const auto params = model.parameters();
  out << "parameters " << params.size() << "\n";
  char buf[40];
  for (const Parameter* p : params) {
    out << "param " << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << "\n";
    for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", p->value(i, j));
        out << (j ? " " : "") << buf;
      }
      out << "\n";
    }
  }
}

Model read_model(std::istream& in) {
  std::string line, word;
  require(std::getline(in, line) && line == kModelMagic, "read_model: bad magic line");
  std::string name;
  require(static_cast<bool>(in >> word >> name) && word == "design", "read_model: missing design");
  NetworkConfig n;
  require(static_cast<bool>(in >> word >> n.dense_input_dim >> n.n_categorical >> n.vocab_size >>
                            n.embedding_dim >> n.shared_layer_dims[0] >> n.shared_layer_dims[1] >>
                            n.head_layer_dims[0] >> n.head_layer_dims[1]) &&
              word == "network",
          "read_model: missing network line");
  Model m = Model::build(parse_design(name), n, 0);
  std::size_t count = 0;
  require(static_cast<bool>(in >> word >> count) && word == "parameters", "read_model: missing parameter count");
  auto params = m.parameters();
  require(count == params.size(), "read_model: parameter count differs from design");
  for (Parameter* p : params) {
    std::string pname;
    Eigen::Index rows = 0, cols = 0;
    require(static_cast<bool>(in >> word >> pname >> rows >> cols) && word == "param",
            "read_model: malformed parameter header");
    require(pname == p->name && rows == p->value.rows() && cols == p->value.cols(),
            "read_model: unexpected parameter " + pname);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        require(static_cast<bool>(in >> word), "read_model: truncated values for " + pname);
        p->value(i, j) = std::stod(word);
      }
    }
  }
  return m;
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_model(model, out);
  if (!out) throw IoError("write failed: " + path);
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  return read_model(in);
}

}  // namespace esmm
