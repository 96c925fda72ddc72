// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over a linear tape.

#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dcan/tensor.hpp"

namespace dcan {

/// Learning-rate groups; the optimizer scales each group differently.
enum class ParamGroup { backbone, classifier, correction };

std::string_view to_string(ParamGroup group);

/// A named, trainable tensor owned by a model. Gradients accumulate into
/// `grad` when a tape that used the parameter runs backward.
template <typename T>
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::backbone;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, ParamGroup g, Tensor<T> v)
      : name(std::move(n)), group(g), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.data().begin(), grad.data().end(), T{0}); }
};

enum class OpKind : std::uint8_t {
  constant,
  parameter,
  add,
  sub,
  mul,
  div,
  relu,
  sigmoid,
  log,
  exp,
  scale,
  clamp_min,
  matmul,
  transpose,
  conv2d,
  global_avg_pool,
  softmax,
  sum,
  row_sum,
  reshape,
  gather_rows,
  pairwise_sq_dist,
};

std::string_view to_string(OpKind kind);

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const;
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Scalar value of a one-element variable.
  T item() const { return value().item(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a reverse sweep is a valid topological
/// traversal. A tape may run backward once; `reset()` clears it for reuse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Free leaf that receives a gradient (read it back with `grad`).
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to an external parameter. Repeated calls with the same
  /// parameter return the same node.
  Var<T> parameter(Parameter<T>& param);

  /// Appends a computed node. `backward` is stored only when some input
  /// requires a gradient.
  Var<T> record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  bool any_requires_grad(std::initializer_list<std::size_t> ids) const;

  const Tensor<T>& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Incoming gradient of a node during backward (empty when none arrived).
  std::span<const T> grad_in(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient accumulator of an input; empty when the input needs no gradient.
  std::span<T> grad_sink(std::size_t id);

  /// Runs the reverse sweep from a one-element loss, then adds leaf gradients
  /// into their bound parameters.
  void backward(const Var<T>& loss);

  /// Gradient of any node after backward; zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const;

  bool consumed() const noexcept { return consumed_; }
  void reset();

  /// Folds the branch taken at a non-smooth point (ReLU sign, clamp
  /// activation) into a running hash. Finite-difference checks compare
  /// signatures to detect perturbations that cross a kink.
  void set_track_branches(bool on) noexcept { track_branches_ = on; }
  bool tracking_branches() const noexcept { return track_branches_; }
  void note_branch(bool taken) noexcept {
    branch_signature_ = (branch_signature_ ^ (taken ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL)) * 0x100000001b3ULL;
  }
  std::uint64_t branch_signature() const noexcept { return branch_signature_; }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  // deque keeps references to earlier values valid while new nodes append.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
  bool track_branches_ = false;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
};

template <typename T>
Tape<T>& Var<T>::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape().value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape().requires_grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace dcan
