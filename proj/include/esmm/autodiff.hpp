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

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Values on a tape are matrices laid out feature-major: a mini-batch of B
// examples with D features is a D x B matrix, one column per example.
// Parameters live outside the tape; the tape copies their values when they
// are bound and backward() returns gradients keyed by parameter address.

#ifndef ESMM_AUTODIFF_HPP_
#define ESMM_AUTODIFF_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "esmm/errors.hpp"

namespace esmm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Probabilities are clamped into [eps, 1 - eps] before any log.
inline constexpr double kProbabilityEpsilon = 1e-7;

template <typename Scalar>
Scalar sigmoid(Scalar logit) {
  if (logit >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-logit));
  const Scalar e = std::exp(logit);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar clamp_probability(Scalar p) {
  const Scalar eps = Scalar(kProbabilityEpsilon);
  return std::min(std::max(p, eps), Scalar(1) - eps);
}

// Cross-entropy of a single prediction, scaled by a non-negative weight.
template <typename Scalar>
Scalar weighted_bce(Scalar pred, int label, Scalar weight) {
  require(weight >= Scalar(0), "weighted_bce: negative weight");
  require(label == 0 || label == 1, "weighted_bce: label must be 0 or 1");
  const Scalar p = clamp_probability(pred);
  return weight * -(label == 1 ? std::log(p) : std::log(Scalar(1) - p));
}

template <typename Scalar>
struct BasicParameter {
  std::string name;
  Matrix<Scalar> value;
};

template <typename Scalar>
class BasicTape;

template <typename Scalar>
struct BasicVar {
  BasicTape<Scalar>* tape = nullptr;
  std::size_t index = 0;

  const Matrix<Scalar>& value() const { return tape->value(index); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Parameter gradients produced by one backward pass. A parameter that is not
// present received no gradient (it was unreachable from the root).
template <typename Scalar>
class BasicGradients {
 public:
  using Param = BasicParameter<Scalar>;

  const Matrix<Scalar>* find(const Param& p) const {
    auto it = index_.find(&p);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }

  bool contains(const Param& p) const { return index_.count(&p) > 0; }
  std::size_t size() const { return entries_.size(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  template <typename Derived>
  void accumulate(const Param& p, const Eigen::MatrixBase<Derived>& g) {
    auto it = index_.find(&p);
    if (it == index_.end()) {
      index_.emplace(&p, entries_.size());
      entries_.emplace_back(&p, g);
    } else {
      entries_[it->second].second += g;
    }
  }

  Matrix<Scalar>* find_mutable(const Param& p) {
    auto it = index_.find(&p);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }

 private:
  std::vector<std::pair<const Param*, Matrix<Scalar>>> entries_;
  std::unordered_map<const Param*, std::size_t> index_;
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = Matrix<Scalar>;
  using Var = BasicVar<Scalar>;
  using Param = BasicParameter<Scalar>;
  using Gradients = BasicGradients<Scalar>;
  // Reads the output gradient of node `self` and accumulates into parents.
  using Pullback = std::function<void(BasicTape&, std::size_t self)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(Mat value) { return push(std::move(value), {}, nullptr, nullptr); }

  // Parameter leaves read the live value, so a parameter must not change while a
  // tape that references it is still in use.
  Var parameter(const Param& p) { return push(Mat(), {}, nullptr, &p); }

  Var record(Mat value, std::vector<std::size_t> parents, Pullback pullback) {
    for (std::size_t parent : parents) {
      require(parent < nodes_.size(), "tape: parent must precede child");
    }
    return push(std::move(value), std::move(parents), std::move(pullback), nullptr);
  }

  const Mat& value(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.param != nullptr ? n.param->value : n.value;
  }
  const std::vector<std::size_t>& parents(std::size_t i) const { return nodes_[i].parents; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward root w.r.t. node i; zero if unreachable.
  Mat gradient(Var v) const {
    const Node& n = nodes_[v.index];
    return n.has_grad ? n.grad : Mat::Zero(value(v.index).rows(), value(v.index).cols());
  }

  // Output gradient of node i; only meaningful inside a pullback.
  const Mat& output_gradient(std::size_t i) const { return nodes_[i].grad; }

  template <typename Derived>
  void accumulate(std::size_t i, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[i];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  Gradients backward(Var root) {
    require(root.tape == this, "backward: root belongs to another tape");
    const Mat& rv = value(root.index);
    require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a scalar");
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(root.index, Mat::Ones(1, 1));
    Gradients grads;
    for (std::size_t i = root.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.param != nullptr) {
        grads.accumulate(*n.param, n.grad);
      } else if (n.pullback) {
        n.pullback(*this, i);
      }
    }
    return grads;
  }

  // Folds a branch decision (ReLU side, clamp side) into a running signature.
  // Finite-difference checks compare signatures to detect non-smooth points.
  void note_branch(std::uint64_t bits) {
    branch_signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (branch_signature_ << 6) +
                         (branch_signature_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_signature_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    std::vector<std::size_t> parents;
    Pullback pullback;
    const Param* param = nullptr;
  };

  Var push(Mat value, std::vector<std::size_t> parents, Pullback pullback, const Param* param) {
    nodes_.push_back(Node{std::move(value), Mat(), false, std::move(parents),
                          std::move(pullback), param});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::uint64_t branch_signature_ = 0;
};

namespace detail {

template <typename Scalar>
void require_same_tape(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  require(a.tape != nullptr && a.tape == b.tape, "autodiff: operands on different tapes");
}

template <typename Scalar, typename Derived>
std::uint64_t hash_mask(const Eigen::DenseBase<Derived>& mask) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Eigen::Index j = 0; j < mask.cols(); ++j) {
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      h = (h ^ static_cast<std::uint64_t>(mask(i, j))) * 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  auto& t = *a.tape;
  Matrix<Scalar> out = a.value() * b.value();
  const std::size_t ia = a.index, ib = b.index;
  return t.record(std::move(out), {ia, ib}, [ia, ib](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.output_gradient(self);
    tp.accumulate(ia, g * tp.value(ib).transpose());
    tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

// z (n x B) plus a column bias b (n x 1) broadcast over the batch.
template <typename Scalar>
BasicVar<Scalar> add_bias(BasicVar<Scalar> z, BasicVar<Scalar> b) {
  detail::require_same_tape(z, b);
  require(b.cols() == 1 && b.rows() == z.rows(), "add_bias: bias must be a column of matching rows");
  auto& t = *z.tape;
  Matrix<Scalar> out = z.value().colwise() + b.value().col(0);
  const std::size_t iz = z.index, ib = b.index;
  return t.record(std::move(out), {iz, ib}, [iz, ib](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.output_gradient(self);
    tp.accumulate(iz, g);
    tp.accumulate(ib, g.rowwise().sum());
  });
}

template <typename Scalar>
BasicVar<Scalar> add(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<Scalar> out = a.value() + b.value();
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](BasicTape<Scalar>& tp, std::size_t self) {
    tp.accumulate(ia, tp.output_gradient(self));
    tp.accumulate(ib, tp.output_gradient(self));
  });
}

// Elementwise product.
template <typename Scalar>
BasicVar<Scalar> mul(BasicVar<Scalar> a, BasicVar<Scalar> b) {
  detail::require_same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.output_gradient(self);
    tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

template <typename Scalar>
BasicVar<Scalar> scale(BasicVar<Scalar> a, Scalar c) {
  Matrix<Scalar> out = a.value() * c;
  const std::size_t ia = a.index;
  return a.tape->record(std::move(out), {ia}, [ia, c](BasicTape<Scalar>& tp, std::size_t self) {
    tp.accumulate(ia, tp.output_gradient(self) * c);
  });
}

template <typename Scalar>
BasicVar<Scalar> sum(BasicVar<Scalar> a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.index;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->record(std::move(out), {ia}, [ia, r, c](BasicTape<Scalar>& tp, std::size_t self) {
    tp.accumulate(ia, Matrix<Scalar>::Constant(r, c, tp.output_gradient(self)(0, 0)));
  });
}

// max(0, v); the subgradient at exactly 0 is 0.
template <typename Scalar>
BasicVar<Scalar> relu(BasicVar<Scalar> a) {
  const auto& x = a.value();
  Matrix<Scalar> out = x.cwiseMax(Scalar(0));
  a.tape->note_branch(detail::hash_mask<Scalar>((x.array() > Scalar(0)).template cast<int>()));
  const std::size_t ia = a.index;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& x = tp.value(ia);
    tp.accumulate(ia, (x.array() > Scalar(0)).select(tp.output_gradient(self), Scalar(0)));
  });
}

template <typename Scalar>
BasicVar<Scalar> sigmoid(BasicVar<Scalar> a) {
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar v) { return sigmoid(v); });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& s = tp.value(self);
    tp.accumulate(ia, tp.output_gradient(self).cwiseProduct(
                          s.cwiseProduct((Scalar(1) - s.array()).matrix())));
  });
}

// Sum over the batch of weight * cross-entropy(pred, label). `pred`, `labels`
// and `weights` are 1 x B. Predictions are clamped into [eps, 1 - eps]; a
// clamped prediction receives zero gradient.
template <typename Scalar>
BasicVar<Scalar> weighted_bce(BasicVar<Scalar> pred, const RowVector<Scalar>& labels,
                              const RowVector<Scalar>& weights) {
  require(pred.rows() == 1, "weighted_bce: predictions must be a row");
  require(labels.cols() == pred.cols() && weights.cols() == pred.cols(),
          "weighted_bce: length mismatch");
  require((weights.array() >= Scalar(0)).all(), "weighted_bce: negative weight");
  require(((labels.array() == Scalar(0)) || (labels.array() == Scalar(1))).all(),
          "weighted_bce: labels must be 0 or 1");
  const Scalar eps = Scalar(kProbabilityEpsilon);
  const auto& p = pred.value();
  RowVector<Scalar> pc = p.array().max(eps).min(Scalar(1) - eps).matrix();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = -(weights.array() * (labels.array() * pc.array().log() +
                                   (Scalar(1) - labels.array()) * (Scalar(1) - pc.array()).log()))
                   .sum();
  pred.tape->note_branch(detail::hash_mask<Scalar>(
      ((p.array() >= eps) && (p.array() <= Scalar(1) - eps)).template cast<int>()));
  const std::size_t ip = pred.index;
  return pred.tape->record(
      std::move(out), {ip}, [ip, labels, weights, eps](BasicTape<Scalar>& tp, std::size_t self) {
        const Scalar g = tp.output_gradient(self)(0, 0);
        const auto& p = tp.value(ip);
        RowVector<Scalar> d(p.cols());
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
          const Scalar pj = p(0, j);
          if (weights(j) == Scalar(0) || pj < eps || pj > Scalar(1) - eps) {
            d(j) = Scalar(0);
          } else {
            const Scalar z = labels(j);
            d(j) = g * weights(j) * (-(z / pj) + (Scalar(1) - z) / (Scalar(1) - pj));
          }
        }
        tp.accumulate(ip, d);
      });
}

// Stacks vars with equal column counts on top of each other.
template <typename Scalar>
BasicVar<Scalar> vstack(std::span<const BasicVar<Scalar>> parts) {
  require(!parts.empty(), "vstack: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<std::size_t> parents;
  std::vector<Eigen::Index> offsets;
  for (const auto& v : parts) {
    detail::require_same_tape(parts.front(), v);
    require(v.cols() == cols, "vstack: column counts differ");
    offsets.push_back(rows);
    rows += v.rows();
    parents.push_back(v.index);
  }
  Matrix<Scalar> out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  }
  auto& t = *parts.front().tape;
  std::vector<std::size_t> ps = parents;
  return t.record(std::move(out), std::move(parents),
                  [ps, offsets](BasicTape<Scalar>& tp, std::size_t self) {
                    const auto& g = tp.output_gradient(self);
                    for (std::size_t k = 0; k < ps.size(); ++k) {
                      tp.accumulate(ps[k], g.middleRows(offsets[k], tp.value(ps[k]).rows()));
                    }
                  });
}

// Gathers rows `indices` of a (vocab x dim) table into a (dim x B) matrix.
template <typename Scalar>
BasicVar<Scalar> gather_rows(BasicVar<Scalar> table, std::span<const int> indices) {
  const auto& tv = table.value();
  Matrix<Scalar> out(tv.cols(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    require(indices[j] >= 0 && indices[j] < tv.rows(), "embedding lookup: index out of range");
    out.col(static_cast<Eigen::Index>(j)) = tv.row(indices[j]).transpose();
  }
  const std::size_t it = table.index;
  std::vector<int> idx(indices.begin(), indices.end());
  return table.tape->record(std::move(out), {it}, [it, idx](BasicTape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.output_gradient(self);
    const auto& tv = tp.value(it);
    Matrix<Scalar> d = Matrix<Scalar>::Zero(tv.rows(), tv.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      d.row(idx[j]) += g.col(static_cast<Eigen::Index>(j)).transpose();
    }
    tp.accumulate(it, d);
  });
}

// Fully connected layer: out = weights * in + biases.
template <typename Scalar>
class BasicDenseLayer {
 public:
  BasicDenseLayer() = default;

  // Glorot-uniform weights, zero biases.
  template <typename Rng>
  BasicDenseLayer(const std::string& name, Eigen::Index in_dim, Eigen::Index out_dim, Rng& rng) {
    require(in_dim > 0 && out_dim > 0, "dense layer: dimensions must be positive");
    const Scalar limit = std::sqrt(Scalar(6) / Scalar(in_dim + out_dim));
    std::uniform_real_distribution<Scalar> u(-limit, limit);
    weights_.name = name + ".weights";
    weights_.value.resize(out_dim, in_dim);
    for (Eigen::Index i = 0; i < out_dim; ++i) {
      for (Eigen::Index j = 0; j < in_dim; ++j) weights_.value(i, j) = u(rng);
    }
    biases_.name = name + ".biases";
    biases_.value = Matrix<Scalar>::Zero(out_dim, 1);
  }

  BasicDenseLayer(const std::string& name, Matrix<Scalar> weights, Vector<Scalar> biases) {
    require(weights.rows() == biases.rows(), "dense layer: bias length must equal out_dim");
    require(weights.size() > 0, "dense layer: empty weights");
    weights_ = {name + ".weights", std::move(weights)};
    biases_ = {name + ".biases", Matrix<Scalar>(biases)};
  }

  Eigen::Index in_dim() const { return weights_.value.cols(); }
  Eigen::Index out_dim() const { return weights_.value.rows(); }

  const BasicParameter<Scalar>& weights() const { return weights_; }
  const BasicParameter<Scalar>& biases() const { return biases_; }
  BasicParameter<Scalar>& weights() { return weights_; }
  BasicParameter<Scalar>& biases() { return biases_; }

 private:
  BasicParameter<Scalar> weights_;
  BasicParameter<Scalar> biases_;
};

template <typename Scalar>
BasicVar<Scalar> dense_forward(BasicTape<Scalar>& tape, const BasicDenseLayer<Scalar>& layer,
                               BasicVar<Scalar> input) {
  require(input.rows() == layer.in_dim(), "dense_forward: input length differs from in_dim");
  return add_bias(matmul(tape.parameter(layer.weights()), input), tape.parameter(layer.biases()));
}

// Tape-free evaluation for a single input vector.
template <typename Scalar>
Vector<Scalar> dense_forward(const BasicDenseLayer<Scalar>& layer, const Vector<Scalar>& input) {
  require(input.size() == layer.in_dim(), "dense_forward: input length differs from in_dim");
  return layer.weights().value * input + layer.biases().value.col(0);
}

template <typename Scalar>
class BasicEmbeddingTable {
 public:
  BasicEmbeddingTable() = default;

  template <typename Rng>
  BasicEmbeddingTable(const std::string& name, Eigen::Index vocab_size, Eigen::Index dim, Rng& rng) {
    require(vocab_size > 0 && dim > 0, "embedding table: sizes must be positive");
    const Scalar limit = std::sqrt(Scalar(6) / Scalar(vocab_size + dim));
    std::uniform_real_distribution<Scalar> u(-limit, limit);
    rows_.name = name + ".rows";
    rows_.value.resize(vocab_size, dim);
    for (Eigen::Index i = 0; i < vocab_size; ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) rows_.value(i, j) = u(rng);
    }
  }

  Eigen::Index vocab_size() const { return rows_.value.rows(); }
  Eigen::Index dim() const { return rows_.value.cols(); }
  const BasicParameter<Scalar>& rows() const { return rows_; }
  BasicParameter<Scalar>& rows() { return rows_; }

 private:
  BasicParameter<Scalar> rows_;
};

template <typename Scalar>
BasicVar<Scalar> lookup(BasicTape<Scalar>& tape, const BasicEmbeddingTable<Scalar>& table,
                        std::span<const int> indices) {
  return gather_rows(tape.parameter(table.rows()), indices);
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Per-parameter first/second moments; slot i belongs to params[i].
template <typename Scalar>
struct BasicAdamState {
  struct Slot {
    Matrix<Scalar> m;
    Matrix<Scalar> v;
    std::int64_t steps = 0;
  };
  std::vector<Slot> slots;
};

namespace detail {

template <typename Scalar>
const Matrix<Scalar>* checked_gradient(const BasicParameter<Scalar>& p,
                                       const BasicGradients<Scalar>& grads) {
  const Matrix<Scalar>* g = grads.find(p);
  if (g == nullptr) return nullptr;
  require(g->rows() == p.value.rows() && g->cols() == p.value.cols(),
          "optimizer: gradient shape differs from parameter " + p.name);
  if (!g->allFinite()) throw DivergenceError("non-finite gradient for parameter " + p.name);
  return g;
}

}  // namespace detail

// One bias-corrected Adam update. Parameters that received no gradient in
// `grads` are skipped entirely, moments included.
template <typename Scalar>
void adam_step(std::span<BasicParameter<Scalar>* const> params, const BasicGradients<Scalar>& grads,
               BasicAdamState<Scalar>& state, Scalar lr, const AdamOptions& opt = {}) {
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m = Matrix<Scalar>::Zero(params[i]->value.rows(), params[i]->value.cols());
      state.slots[i].v = state.slots[i].m;
    }
  }
  require(state.slots.size() == params.size(), "adam_step: state does not match parameters");
  const Scalar b1 = Scalar(opt.beta1), b2 = Scalar(opt.beta2), eps = Scalar(opt.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& s = state.slots[i];
    require(s.m.rows() == p.value.rows() && s.m.cols() == p.value.cols(),
            "adam_step: state shape differs from parameter " + p.name);
    const Matrix<Scalar>* g = detail::checked_gradient(p, grads);
    if (g == nullptr) continue;
    ++s.steps;
    s.m = b1 * s.m + (Scalar(1) - b1) * *g;
    s.v = b2 * s.v + (Scalar(1) - b2) * g->cwiseProduct(*g);
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(s.steps));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(s.steps));
    p.value.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
  }
}

template <typename Scalar>
void sgd_step(std::span<BasicParameter<Scalar>* const> params, const BasicGradients<Scalar>& grads,
              Scalar lr) {
  for (auto* p : params) {
    if (const Matrix<Scalar>* g = detail::checked_gradient(*p, grads)) p->value -= lr * *g;
  }
}

struct GradCheckOptions {
  double step = 1e-5;
  double relative_tolerance = 1e-4;
  // Below this analytic magnitude the absolute tolerance applies instead.
  double small_gradient = 1e-4;
  double absolute_tolerance = 1e-7;
  // Check at most this many entries per parameter tensor (0 = all).
  std::size_t max_entries_per_parameter = 0;
  // Test hook: perturb every analytic gradient before comparing.
  bool corrupt_analytic = false;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  // Entries whose +/- step crossed a ReLU or clamp boundary.
  std::size_t skipped_nonsmooth = 0;
  std::string worst_parameter;
  bool passed() const { return failures == 0 && checked > 0; }
};

// Compares reverse-mode gradients of `loss` against central differences.
// `loss` builds a scalar on the given tape from the current parameter values.
template <typename Scalar, typename LossFn>
GradCheckReport check_gradients(std::span<BasicParameter<Scalar>* const> params, LossFn&& loss,
                                const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  BasicGradients<Scalar> grads;
  std::uint64_t base_signature = 0;
  {
    BasicTape<Scalar> tape;
    auto root = loss(tape);
    base_signature = tape.branch_signature();
    grads = tape.backward(root);
  }
  auto evaluate = [&](std::uint64_t& signature) {
    BasicTape<Scalar> tape;
    auto root = loss(tape);
    signature = tape.branch_signature();
    return root.value()(0, 0);
  };
  const Scalar h = Scalar(opt.step);
  for (auto* p : params) {
    const Matrix<Scalar>* g = grads.find(*p);
    const Eigen::Index n = p->value.size();
    Eigen::Index stride = 1;
    if (opt.max_entries_per_parameter > 0 &&
        static_cast<std::size_t>(n) > opt.max_entries_per_parameter) {
      stride = n / static_cast<Eigen::Index>(opt.max_entries_per_parameter);
    }
    for (Eigen::Index k = 0; k < n; k += stride) {
      Scalar& entry = p->value.data()[k];
      const Scalar saved = entry;
      std::uint64_t sig_plus = 0, sig_minus = 0;
      entry = saved + h;
      const Scalar up = evaluate(sig_plus);
      entry = saved - h;
      const Scalar down = evaluate(sig_minus);
      entry = saved;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++report.skipped_nonsmooth;
        continue;
      }
      const double numeric = double((up - down) / (Scalar(2) * h));
      double analytic = g == nullptr ? 0.0 : double(g->data()[k]);
      if (opt.corrupt_analytic) analytic = analytic * 1.01 + 1e-3;
      ++report.checked;
      const double diff = std::abs(analytic - numeric);
      const double mag = std::max(std::abs(analytic), std::abs(numeric));
      bool ok = true;
      if (mag < opt.small_gradient) {
        report.max_absolute_error = std::max(report.max_absolute_error, diff);
        ok = diff <= opt.absolute_tolerance;
      } else {
        const double rel = diff / mag;
        if (rel > report.max_relative_error) {
          report.max_relative_error = rel;
          report.worst_parameter = p->name;
        }
        ok = rel <= opt.relative_tolerance;
      }
      if (!ok) ++report.failures;
    }
  }
  return report;
}

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using Parameter = BasicParameter<double>;
using Gradients = BasicGradients<double>;
using DenseLayer = BasicDenseLayer<double>;
using EmbeddingTable = BasicEmbeddingTable<double>;
using AdamState = BasicAdamState<double>;

}  // namespace esmm

#endif  // ESMM_AUTODIFF_HPP_
