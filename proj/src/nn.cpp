// SPDX-License-Identifier: Apache-2.0

#include "dcan/nn.hpp"

#include <cmath>

namespace dcan {

std::string_view to_string(Domain domain) {
  return domain == Domain::source ? "source" : "target";
}

Domain parse_domain(std::string_view text) {
  if (text == "source") return Domain::source;
  if (text == "target") return Domain::target;
  throw std::invalid_argument("unknown domain tag '" + std::string(text) + "'");
}

namespace nn {

template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void init_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

// Linear ---------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(const std::string& prefix, std::size_t in, std::size_t out, ParamGroup group, Rng& rng)
    : weight_(prefix + ".weight", group, Tensor<T>({in, out})), bias_(prefix + ".bias", group, Tensor<T>({out})) {
  init_uniform(weight_.value, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

template <typename T>
Var<T> Linear<T>::forward(Tape<T>& tape, const Var<T>& x) {
  if (x.shape().size() != 2 || x.shape()[1] != in_features()) {
    throw ShapeError("linear layer '" + weight_.name + "' expects [N," + std::to_string(in_features()) + "], got " +
                     shape_string(x.shape()));
  }
  return add(matmul(x, tape.parameter(weight_)), tape.parameter(bias_));
}

// Conv2d ---------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                  std::size_t padding, Rng& rng)
    : weight_(prefix + ".weight", ParamGroup::backbone, Tensor<T>({out, in, kernel, kernel})),
      stride_(stride),
      padding_(padding) {
  init_normal(weight_.value, std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)), rng);
}

// FrozenNorm -----------------------------------------------------------------

template <typename T>
FrozenNorm<T>::FrozenNorm(std::string prefix, std::size_t channels)
    : name(std::move(prefix)),
      mean({channels}, T{0}),
      var({channels}, T{1}),
      scale({channels}, T{1}),
      shift({channels}, T{0}) {}

template <typename T>
Var<T> FrozenNorm<T>::forward(Tape<T>& tape, const Var<T>& x) const {
  const std::size_t c = mean.numel();
  if (x.shape().size() != 4 || x.shape()[1] != c) {
    throw ShapeError("norm '" + name + "' expects [N," + std::to_string(c) + ",H,W], got " + shape_string(x.shape()));
  }
  Tensor<T> mul_by({1, c, 1, 1});
  Tensor<T> add_by({1, c, 1, 1});
  for (std::size_t i = 0; i < c; ++i) {
    mul_by[i] = scale[i] / std::sqrt(var[i] + eps);
    add_by[i] = shift[i] - mean[i] * mul_by[i];
  }
  return add(mul(x, tape.constant(std::move(mul_by))), tape.constant(std::move(add_by)));
}

// DomainConditionedAttention -------------------------------------------------

template <typename T>
DomainConditionedAttention<T>::DomainConditionedAttention(const std::string& prefix, std::size_t channels,
                                                          std::size_t ratio, bool tied, Rng& rng)
    : channels_(channels), ratio_(ratio), tied_(tied) {
  if (ratio == 0 || channels % ratio != 0) {
    throw std::invalid_argument("attention '" + prefix + "': channel count " + std::to_string(channels) +
                                " is not divisible by ratio " + std::to_string(ratio));
  }
  const std::size_t hid = channels / ratio;
  reduce_source_ = Parameter<T>(prefix + ".reduce_source", ParamGroup::backbone, Tensor<T>({channels, hid}));
  expand_ = Parameter<T>(prefix + ".expand", ParamGroup::backbone, Tensor<T>({hid, channels}));
  init_uniform(reduce_source_.value, 1.0 / std::sqrt(static_cast<double>(channels)), rng);
  init_uniform(expand_.value, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
  if (!tied_) {
    // Both routes start from the same weights and diverge through training.
    reduce_target_ = Parameter<T>(prefix + ".reduce_target", ParamGroup::backbone, reduce_source_.value);
  }
}

template <typename T>
Parameter<T>& DomainConditionedAttention<T>::reduce(Domain domain) {
  switch (domain) {
    case Domain::source: return reduce_source_;
    case Domain::target: return tied_ ? reduce_source_ : reduce_target_;
  }
  throw std::invalid_argument("unknown domain tag " + std::to_string(static_cast<int>(domain)));
}

template <typename T>
typename DomainConditionedAttention<T>::Output DomainConditionedAttention<T>::forward(Tape<T>& tape, const Var<T>& x,
                                                                                      Domain domain) {
  const Shape s = x.shape();  // copied: recording below may move tape storage
  if (s.size() != 4 || s[1] != channels_) {
    throw ShapeError("attention over " + std::to_string(channels_) + " channels got input " + shape_string(s));
  }
  Parameter<T>& route = reduce(domain);
  Var<T> g = global_avg_pool(x);
  Var<T> f = matmul(g, tape.parameter(route));
  Var<T> v = sigmoid(matmul(relu(f), tape.parameter(expand_)));
  Var<T> gate = reshape(v, {s[0], channels_, 1, 1});
  return {mul(x, gate), v};
}

template <typename T>
void DomainConditionedAttention<T>::collect(ParamRefs<T>& out) {
  out.push_back(&reduce_source_);
  if (!tied_) out.push_back(&reduce_target_);
  out.push_back(&expand_);
}

// FeatureCorrectionBlock -----------------------------------------------------

template <typename T>
FeatureCorrectionBlock<T>::FeatureCorrectionBlock(const std::string& prefix, std::size_t width, Rng& rng)
    : width_(width),
      hidden_(hidden_width_for(width)),
      fc1_(prefix + ".fc1", width, hidden_, ParamGroup::correction, rng),
      fc2_(prefix + ".fc2", hidden_, width, ParamGroup::correction, rng) {
  auto zero = [](Tensor<T>& t) { std::fill(t.data().begin(), t.data().end(), T{0}); };
  zero(fc2_.weight().value);
  zero(fc2_.bias().value);
}

template <typename T>
typename FeatureCorrectionBlock<T>::Output FeatureCorrectionBlock<T>::forward(Tape<T>& tape, const Var<T>& h) {
  if (h.shape().size() != 2 || h.shape()[1] != width_) {
    throw ShapeError("correction block of width " + std::to_string(width_) + " got " + shape_string(h.shape()));
  }
  Var<T> delta = fc2_.forward(tape, relu(fc1_.forward(tape, h)));
  return {delta, add(h, delta)};
}

template <typename T>
Var<T> FeatureCorrectionBlock<T>::correct_probabilities(Tape<T>& tape, const Var<T>& probs) {
  require_simplex(probs.value(), kSimplexTolerance, "softmax correction");
  Var<T> shifted = clamp_min(forward(tape, probs).corrected, static_cast<T>(kProbabilityFloor));
  return div(shifted, row_sum(shifted));
}

// ResidualBlock --------------------------------------------------------------

template <typename T>
ResidualBlock<T>::ResidualBlock(const std::string& prefix, std::size_t in_channels, std::size_t out_channels,
                                std::size_t stride, std::size_t attention_ratio, bool tied, Rng& rng,
                                bool force_projection)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      has_projection_(force_projection || stride != 1 || in_channels != out_channels),
      conv1_(prefix + ".conv1", in_channels, out_channels, stride + 2, stride, 1, rng),
      norm1_(prefix + ".norm1", out_channels),
      conv2_(prefix + ".conv2", out_channels, out_channels, 3, 1, 1, rng),
      norm2_(prefix + ".norm2", out_channels),
      attention_(prefix + ".attention", out_channels, attention_ratio, tied, rng) {
  if (has_projection_) {
    projection_ = Conv2d<T>(prefix + ".projection", in_channels, out_channels, stride, stride, 0, rng);
    projection_norm_ = FrozenNorm<T>(prefix + ".projection_norm", out_channels);
  }
}

template <typename T>
typename ResidualBlock<T>::Output ResidualBlock<T>::forward(Tape<T>& tape, const Var<T>& x, Domain domain) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != in_channels_) {
    throw ShapeError("residual block expects " + std::to_string(in_channels_) + " input channels, got " +
                     shape_string(s));
  }
  Var<T> h = relu(norm1_.forward(tape, conv1_.forward(tape, x)));
  h = norm2_.forward(tape, conv2_.forward(tape, h));
  auto att = attention_.forward(tape, h, domain);
  Var<T> skip = has_projection_ ? projection_norm_.forward(tape, projection_.forward(tape, x)) : x;
  if (skip.shape() != att.features.shape()) {
    throw ShapeError("skip path " + shape_string(skip.shape()) + " does not match residual branch " +
                     shape_string(att.features.shape()));
  }
  return {relu(add(skip, att.features)), att.scales};
}

template <typename T>
void ResidualBlock<T>::collect(ParamRefs<T>& out) {
  conv1_.collect(out);
  conv2_.collect(out);
  attention_.collect(out);
  if (has_projection_) projection_.collect(out);
}

template <typename T>
void ResidualBlock<T>::collect_norms(std::vector<FrozenNorm<T>*>& out) {
  out.push_back(&norm1_);
  out.push_back(&norm2_);
  if (has_projection_) out.push_back(&projection_norm_);
}

#define DCAN_INSTANTIATE_NN(T)                                 \
  template void init_uniform(Tensor<T>&, double, Rng&);        \
  template void init_normal(Tensor<T>&, double, Rng&);         \
  template class Linear<T>;                                    \
  template class Conv2d<T>;                                    \
  template struct FrozenNorm<T>;                               \
  template class DomainConditionedAttention<T>;                \
  template class FeatureCorrectionBlock<T>;                    \
  template class ResidualBlock<T>;

DCAN_INSTANTIATE_NN(float)
DCAN_INSTANTIATE_NN(double)

}  // namespace nn
}  // namespace dcan
