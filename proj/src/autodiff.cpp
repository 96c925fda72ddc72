// SPDX-License-Identifier: Apache-2.0

#include "dcan/autodiff.hpp"

namespace dcan {

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::classifier: return "classifier";
    case ParamGroup::correction: return "correction";
  }
  return "?";
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::scale: return "scale";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::conv2d: return "conv2d";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::softmax: return "softmax";
    case OpKind::sum: return "sum";
    case OpKind::row_sum: return "row_sum";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::pairwise_sq_dist: return "pairwise_sq_dist";
  }
  return "?";
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  if (consumed_) throw std::logic_error("tape already ran backward; reset() before recording");
  Node node;
  node.kind = OpKind::constant;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Var<T> v = constant(std::move(value));
  nodes_.back().requires_grad = grad_enabled_;
  return v;
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  if (auto it = param_nodes_.find(&param); it != param_nodes_.end()) return Var<T>(this, it->second);
  if (consumed_) throw std::logic_error("tape already ran backward; reset() before recording");
  Node node;
  node.kind = OpKind::parameter;
  node.external = &param.value;
  node.param = &param;
  node.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(node));
  param_nodes_.emplace(&param, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
bool Tape<T>::any_requires_grad(std::initializer_list<std::size_t> ids) const {
  if (!grad_enabled_) return false;
  for (auto id : ids) {
    if (nodes_.at(id).requires_grad) return true;
  }
  return false;
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
  if (consumed_) throw std::logic_error("tape already ran backward; reset() before recording");
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  bool needs = false;
  if (grad_enabled_) {
    for (auto id : inputs) needs = needs || nodes_.at(id).requires_grad;
  }
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.external ? *node.external : node.value;
}

template <typename T>
std::span<T> Tape<T>::grad_sink(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(value(id).numel(), T{0});
  return node.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) throw std::invalid_argument("loss belongs to a different tape");
  if (consumed_) throw std::logic_error("backward already ran on this tape; call reset() first");
  const auto& lv = value(loss.id());
  if (lv.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + shape_string(lv.shape()));
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_sink(loss.id())[0] = T{1};
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param) {
      auto dst = node.param->grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += node.grad[k];
    }
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.empty()) return Tensor<T>(value(v.id()).shape());
  return Tensor<T>(value(v.id()).shape(), node.grad);
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  param_nodes_.clear();
  consumed_ = false;
  branch_signature_ = 0xcbf29ce484222325ULL;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dcan
