// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dcan/autodiff.hpp"
#include "dcan/ops.hpp"

namespace dcan {

using Rng = std::mt19937_64;

enum class Domain : std::uint8_t { source, target };

std::string_view to_string(Domain domain);
Domain parse_domain(std::string_view text);

namespace nn {

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

/// Fills with U(-bound, bound). Values are drawn in double so float and
/// double models built from one seed agree up to rounding.
template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng);
template <typename T>
void init_normal(Tensor<T>& t, double stddev, Rng& rng);

/// y = x W + b, with W stored [in, out].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& prefix, std::size_t in, std::size_t out, ParamGroup group, Rng& rng);

  Var<T> forward(Tape<T>& tape, const Var<T>& x);

  std::size_t in_features() const { return weight_.value.dim(0); }
  std::size_t out_features() const { return weight_.value.dim(1); }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  void collect(ParamRefs<T>& out) { out.push_back(&weight_); out.push_back(&bias_); }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Bias-free convolution, He-normal initialised.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t padding, Rng& rng);

  Var<T> forward(Tape<T>& tape, const Var<T>& x) { return conv2d(x, tape.parameter(weight_), stride_, padding_); }

  Parameter<T>& weight() { return weight_; }
  std::size_t stride() const { return stride_; }
  void collect(ParamRefs<T>& out) { out.push_back(&weight_); }

 private:
  Parameter<T> weight_;
  std::size_t stride_ = 1;
  std::size_t padding_ = 0;
};

/// Per-channel affine normalisation with frozen statistics:
/// y = (x - mean) / sqrt(var + eps) * scale + shift. Nothing here is trained;
/// the statistics start at the identity (0, 1, 1, 0).
template <typename T>
struct FrozenNorm {
  std::string name;
  Tensor<T> mean, var, scale, shift;
  T eps = static_cast<T>(1e-5);

  FrozenNorm() = default;
  FrozenNorm(std::string prefix, std::size_t channels);

  Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
};

/// Channel attention with one reduction projection per domain and a shared
/// expansion projection:
///   g = GAP(X);  f = g * reduce[domain];  v = sigmoid(ReLU(f) * expand);
///   out[n,c] = v[n,c] * X[n,c].
/// With `tied`, the target route reads the source reduction weights, so both
/// domains are computed identically.
template <typename T>
class DomainConditionedAttention {
 public:
  struct Output {
    Var<T> features;
    Var<T> scales;  ///< v, shape [N, C]
  };

  DomainConditionedAttention() = default;
  DomainConditionedAttention(const std::string& prefix, std::size_t channels, std::size_t ratio, bool tied,
                             Rng& rng);

  Output forward(Tape<T>& tape, const Var<T>& x, Domain domain);

  std::size_t channels() const { return channels_; }
  std::size_t ratio() const { return ratio_; }
  std::size_t hidden() const { return channels_ / ratio_; }
  bool tied() const { return tied_; }

  Parameter<T>& reduce(Domain domain);
  Parameter<T>& expand() { return expand_; }
  void collect(ParamRefs<T>& out);

 private:
  std::size_t channels_ = 0;
  std::size_t ratio_ = 1;
  bool tied_ = false;
  Parameter<T> reduce_source_;
  Parameter<T> reduce_target_;
  Parameter<T> expand_;
};

/// FC-ReLU-FC residual adapter: delta = fc2(ReLU(fc1(H))), corrected = H + delta.
/// fc2 starts at exactly zero, so a fresh block is the identity map.
template <typename T>
class FeatureCorrectionBlock {
 public:
  struct Output {
    Var<T> delta;
    Var<T> corrected;
  };

  /// Simplex tolerance for `correct_probabilities` inputs.
  static constexpr double kSimplexTolerance = 1e-5;
  /// Floor applied before renormalising corrected probabilities.
  static constexpr double kProbabilityFloor = 1e-8;

  FeatureCorrectionBlock() = default;
  FeatureCorrectionBlock(const std::string& prefix, std::size_t width, Rng& rng);

  static std::size_t hidden_width_for(std::size_t width) { return std::max<std::size_t>(4, width / 2); }

  Output forward(Tape<T>& tape, const Var<T>& h);
  /// Correction applied after a softmax: probs + delta, floored at
  /// kProbabilityFloor and renormalised to unit row sums.
  Var<T> correct_probabilities(Tape<T>& tape, const Var<T>& probs);

  std::size_t width() const { return width_; }
  std::size_t hidden_width() const { return hidden_; }
  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }
  void collect(ParamRefs<T>& out) { fc1_.collect(out); fc2_.collect(out); }

 private:
  std::size_t width_ = 0;
  std::size_t hidden_ = 0;
  Linear<T> fc1_;
  Linear<T> fc2_;
};

/// Basic residual block with attention on the residual branch just before the
/// skip addition:
///   out = ReLU(skip(X) + DCA(norm2(conv2(ReLU(norm1(conv1(X)))))))
/// conv1 has kernel stride+2 and padding 1, so an extent divisible by the
/// stride maps exactly to extent/stride (3x3 at stride 1). A stride x stride
/// projection (with its own frozen norm) forms the skip path when the extent
/// or width changes, or when requested.
template <typename T>
class ResidualBlock {
 public:
  struct Output {
    Var<T> features;
    Var<T> attention;  ///< v of the block's attention module, [N, C_out]
  };

  ResidualBlock() = default;
  ResidualBlock(const std::string& prefix, std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                std::size_t attention_ratio, bool tied, Rng& rng, bool force_projection = false);

  Output forward(Tape<T>& tape, const Var<T>& x, Domain domain);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  bool has_projection() const { return has_projection_; }

  Conv2d<T>& conv1() { return conv1_; }
  Conv2d<T>& conv2() { return conv2_; }
  Conv2d<T>& projection() { return projection_; }
  DomainConditionedAttention<T>& attention() { return attention_; }
  void collect(ParamRefs<T>& out);
  void collect_norms(std::vector<FrozenNorm<T>*>& out);

 private:
  std::size_t in_channels_ = 0;
  std::size_t out_channels_ = 0;
  bool has_projection_ = false;
  Conv2d<T> conv1_;
  FrozenNorm<T> norm1_;
  Conv2d<T> conv2_;
  FrozenNorm<T> norm2_;
  DomainConditionedAttention<T> attention_;
  Conv2d<T> projection_;
  FrozenNorm<T> projection_norm_;
};

}  // namespace nn
}  // namespace dcan
