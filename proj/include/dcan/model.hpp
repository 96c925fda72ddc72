// SPDX-License-Identifier: Apache-2.0
//
// The assembled network: a residual backbone whose blocks carry
// domain-conditioned attention, a linear classifier, and two feature
// correction blocks (after pooling and after the softmax).

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcan/losses.hpp"
#include "dcan/nn.hpp"

namespace dcan::model {

/// Thrown for invalid configurations; `field()` names the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Variant : std::uint8_t {
  full,
  source_only,
  no_ca,
  no_lm_lreg_1,
  no_lm_lreg_2,
  no_lreg_1,
  no_lreg_2,
  no_entropy,
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);
std::span<const Variant> all_variants();

/// Variants that share a single attention route between domains. The
/// source-only baseline never trains a target route, so it is tied as well.
bool ties_attention(Variant v);
bool has_corrections(Variant v);
loss::TermMask term_mask(Variant v, std::size_t layers);

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> stage_widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t attention_ratio = 16;
  std::size_t num_classes = 5;
  std::size_t correction_layers = 2;
  std::size_t stem_stride = 2;

  std::size_t feature_width() const { return stage_widths.empty() ? 0 : stage_widths.back(); }
  /// min(attention_ratio, C / 4), at least 1.
  std::size_t effective_ratio(std::size_t channels) const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Which softmax output classifies target samples.
enum class InferencePath : std::uint8_t { corrected, uncorrected };

std::string_view to_string(InferencePath p);
InferencePath parse_inference_path(std::string_view text);

/// Outputs of one pass. The uncorrected path is softmax(classifier(H_1)); the
/// corrected path feeds H_1 + dH_1 to the classifier and then applies the
/// softmax-layer correction, so it is the model's target-domain estimate.
template <typename T>
struct ForwardRecord {
  Var<T> pooled;            ///< H_1
  Var<T> pooled_corrected;  ///< H_1 + dH_1
  Var<T> probs;             ///< H_2 on the uncorrected path
  Var<T> probs_shifted;     ///< softmax input to the second block plus its delta, before clamping
  Var<T> probs_corrected;   ///< probs_shifted clamped and renormalised onto the simplex
  std::vector<Var<T>> attention;  ///< v of the last block of each stage
};

template <typename T>
class DcanModel {
 public:
  DcanModel(const ModelConfig& config, Variant variant, std::uint64_t seed);

  DcanModel(const DcanModel&) = delete;
  DcanModel& operator=(const DcanModel&) = delete;
  DcanModel(DcanModel&&) = default;
  DcanModel& operator=(DcanModel&&) = default;

  /// Both domains run the same graph apart from the attention route, and both
  /// report corrected and uncorrected outputs. Source samples are classified
  /// from the uncorrected path, target samples from the corrected one.
  /// `corrections = false` (or a variant without corrections) makes the
  /// corrected fields aliases of the uncorrected ones.
  ForwardRecord<T> forward(Tape<T>& tape, const Var<T>& batch, Domain domain, bool corrections = true);

  /// Arg-max labels (ties to the lowest index). Target samples use the
  /// corrected softmax unless `path` says otherwise.
  std::vector<std::size_t> predict(const Tensor<T>& batch, Domain domain,
                                   InferencePath path = InferencePath::corrected);

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return variant_; }
  bool corrected() const { return correction_pooled_ != nullptr; }

  /// Trainable parameters in a fixed order.
  nn::ParamRefs<T> parameters();
  std::vector<nn::FrozenNorm<T>*> norms();
  std::size_t parameter_count();

  std::vector<nn::ResidualBlock<T>>& blocks() { return blocks_; }
  /// Index into blocks() of the last block of every stage.
  std::vector<std::size_t> stage_last_blocks() const;
  nn::Linear<T>& classifier() { return classifier_; }
  nn::FeatureCorrectionBlock<T>* pooled_correction() { return correction_pooled_.get(); }
  nn::FeatureCorrectionBlock<T>* softmax_correction() { return correction_softmax_.get(); }

  void zero_grad();

 private:
  ModelConfig config_;
  Variant variant_;
  nn::Conv2d<T> stem_;
  nn::FrozenNorm<T> stem_norm_;
  std::vector<nn::ResidualBlock<T>> blocks_;
  nn::Linear<T> classifier_;
  std::unique_ptr<nn::FeatureCorrectionBlock<T>> correction_pooled_;
  std::unique_ptr<nn::FeatureCorrectionBlock<T>> correction_softmax_;
};

template <typename T>
DcanModel<T> build(const ModelConfig& config, Variant variant, std::uint64_t seed) {
  return DcanModel<T>(config, variant, seed);
}

/// Loss components of one step as plain numbers.
struct LossBreakdown {
  double source_ce = 0.0;
  std::vector<loss::LayerTerms<double>> per_layer;
  double entropy = 0.0;
  double total = 0.0;
};

template <typename T>
struct StepLosses {
  Var<T> total;
  LossBreakdown values;
  ForwardRecord<T> source;
  std::optional<ForwardRecord<T>> target;
};

/// Records the full objective for one source/target batch pair. One subset R
/// is drawn per correction layer from `rng`; terms disabled by the variant are
/// still evaluated and reported but left out of `total`.
template <typename T>
StepLosses<T> step_losses(DcanModel<T>& model, Tape<T>& tape, const Tensor<T>& source_batch,
                          std::span<const loss::Label> source_labels, const Tensor<T>& target_batch,
                          const loss::LossWeights& weights, const loss::KernelConfig& kernel, Rng& rng,
                          loss::BandwidthPin* pin = nullptr);

extern template class DcanModel<float>;
extern template class DcanModel<double>;

}  // namespace dcan::model
