// SPDX-License-Identifier: Apache-2.0
//
// Scalar objectives: kernel MMD alignment, the random-subset source
// regulariser, source cross-entropy, target entropy, and their weighted sum.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dcan/autodiff.hpp"
#include "dcan/nn.hpp"
#include "dcan/ops.hpp"

namespace dcan::loss {

using Label = std::uint16_t;

/// Sum of gaussian kernels exp(-d^2 / (2 s^2)) with s^2 = multiplier * base.
/// The base is the median pairwise squared distance of the pooled batch
/// (`median_heuristic_multi`) or a fixed value.
struct KernelConfig {
  enum class Bandwidth { median_heuristic_multi, fixed };

  Bandwidth bandwidth = Bandwidth::median_heuristic_multi;
  std::vector<double> multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
  double fixed_base = 1.0;

  void validate() const;
};

/// Lower bound on the median-heuristic base bandwidth.
inline constexpr double kBandwidthFloor = 1e-6;

/// Records the base bandwidth of every MMD evaluation, then replays them in
/// the same order. Finite-difference checks use it to hold the (non-smooth)
/// median constant across perturbed evaluations, matching how the gradient
/// treats it.
class BandwidthPin {
 public:
  double resolve(double computed);
  void replay() { replaying_ = true; cursor_ = 0; }
  std::size_t size() const { return recorded_.size(); }

 private:
  std::vector<double> recorded_;
  std::size_t cursor_ = 0;
  bool replaying_ = false;
};

/// Median of squared distances over all unordered pairs of distinct rows of
/// the pooled set A u B (mean of the two middle values for an even count).
template <typename T>
double median_pairwise_sq_dist(const Tensor<T>& a, const Tensor<T>& b);

/// Biased (V-statistic) squared MMD between the rows of A and B:
///   mean k(a,a') - 2 mean k(a,b) + mean k(b,b').
/// The bandwidth is a constant with respect to the gradient.
template <typename T>
Var<T> mmd(const Var<T>& a, const Var<T>& b, const KernelConfig& kernel, BandwidthPin* pin = nullptr);

/// MMD between uncorrected source features and corrected target features.
template <typename T>
Var<T> correction_alignment_loss(const Var<T>& source, const Var<T>& target_corrected, const KernelConfig& kernel,
                                 BandwidthPin* pin = nullptr);

/// Random subset R of a source batch; realized_size may be zero.
struct SubsetSample {
  std::vector<std::size_t> indices;
  std::size_t realized_size() const { return indices.size(); }
};

/// Includes every position independently with probability p_subset / num_classes.
SubsetSample sample_subset(std::span<const Label> labels, double p_subset, std::size_t num_classes, Rng& rng);

/// Sum over classes k present in the batch of MMD(H_s restricted to class k,
/// corrected H_s restricted to R). Zero when R is empty.
template <typename T>
Var<T> source_regularization_loss(const Var<T>& source, const Var<T>& source_corrected,
                                  std::span<const Label> labels, const SubsetSample& subset,
                                  std::size_t num_classes, const KernelConfig& kernel, BandwidthPin* pin = nullptr);

/// Batch mean of -log(probs[i, label_i]) (log argument floored at 1e-12).
template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const Label> labels);

/// -(1/N) sum_j sum_k p_jk log p_jk.
template <typename T>
Var<T> target_entropy(const Var<T>& probs);

struct LossWeights {
  double alpha = 1.5;
  double beta = 0.1;
  double p_subset = 0.8;
  std::size_t num_correction_layers = 2;

  void validate() const;
};

/// Which terms of the objective are active.
struct TermMask {
  std::vector<bool> alignment;
  std::vector<bool> regularization;
  bool entropy = true;

  static TermMask all(std::size_t layers) { return {std::vector<bool>(layers, true), std::vector<bool>(layers, true), true}; }
  static TermMask none(std::size_t layers) {
    return {std::vector<bool>(layers, false), std::vector<bool>(layers, false), false};
  }
};

template <typename S>
struct LayerTerms {
  S alignment;
  S regularization;
};

/// L = L_s + alpha * sum_l (L_M^l + L_reg^l) + beta * L_e, masked terms
/// dropped. Works for plain doubles and for tape variables.
template <typename S>
S total_objective(const S& source_ce, std::span<const LayerTerms<S>> per_layer, const S& entropy,
                  const LossWeights& w, const TermMask& mask) {
  if (per_layer.size() != w.num_correction_layers) {
    throw std::invalid_argument("expected " + std::to_string(w.num_correction_layers) + " layer terms, got " +
                                std::to_string(per_layer.size()));
  }
  if (mask.alignment.size() != per_layer.size() || mask.regularization.size() != per_layer.size()) {
    throw std::invalid_argument("term mask does not match the number of correction layers");
  }
  std::optional<S> inner;
  auto accumulate = [&inner](const S& term) { inner = inner ? S(*inner + term) : term; };
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    if (mask.alignment[l]) accumulate(per_layer[l].alignment);
    if (mask.regularization[l]) accumulate(per_layer[l].regularization);
  }
  S total = source_ce;
  if (inner) total = total + w.alpha * *inner;
  if (mask.entropy) total = total + w.beta * entropy;
  return total;
}

}  // namespace dcan::loss
