// SPDX-License-Identifier: Apache-2.0

#include "dcan/losses.hpp"

#include <algorithm>
#include <cmath>

namespace dcan::loss {

void KernelConfig::validate() const {
  if (multipliers.empty()) throw std::invalid_argument("kernel multipliers must be non-empty");
  for (double m : multipliers) {
    if (!(m > 0.0) || !std::isfinite(m)) throw std::invalid_argument("kernel multipliers must be positive");
  }
  if (bandwidth == Bandwidth::fixed && !(fixed_base > 0.0)) {
    throw std::invalid_argument("fixed kernel bandwidth must be positive");
  }
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  if (!(p_subset > 0.0 && p_subset <= 1.0)) throw std::invalid_argument("p_subset must lie in (0, 1]");
  if (num_correction_layers == 0) throw std::invalid_argument("num_correction_layers must be positive");
}

double BandwidthPin::resolve(double computed) {
  if (!replaying_) {
    recorded_.push_back(computed);
    return computed;
  }
  if (cursor_ >= recorded_.size()) throw std::logic_error("bandwidth replay ran past the recorded evaluations");
  return recorded_[cursor_++];
}

template <typename T>
double median_pairwise_sq_dist(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t d = a.dim(1);
  const std::size_t na = a.dim(0), n = na + b.dim(0);
  auto row = [&](std::size_t i) { return i < na ? a.raw() + i * d : b.raw() + (i - na) * d; };
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const T* x = row(i);
      const T* y = row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(x[k]) - static_cast<double>(y[k]);
        acc += diff * diff;
      }
      dists.push_back(acc);
    }
  }
  if (dists.empty()) return 0.0;
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
  const double upper = dists[mid];
  if (dists.size() % 2 == 1) return upper;
  const double lower = *std::max_element(dists.begin(), dists.begin() + mid);
  return 0.5 * (lower + upper);
}

template <typename T>
Var<T> mmd(const Var<T>& a, const Var<T>& b, const KernelConfig& kernel, BandwidthPin* pin) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) {
    throw ShapeError("mmd expects [n,D] inputs, got " + shape_string(sa) + " and " + shape_string(sb));
  }
  if (sa[1] != sb[1]) throw ShapeError("mmd feature widths differ: " + shape_string(sa) + " vs " + shape_string(sb));
  if (sa[0] == 0 || sb[0] == 0 || sa[1] == 0) {
    throw ShapeError("mmd needs non-empty inputs, got " + shape_string(sa) + " and " + shape_string(sb));
  }
  kernel.validate();

  double base = kernel.fixed_base;
  if (kernel.bandwidth == KernelConfig::Bandwidth::median_heuristic_multi) {
    base = std::max(median_pairwise_sq_dist(a.value(), b.value()), kBandwidthFloor);
  }
  if (pin) base = pin->resolve(base);

  Var<T> daa = pairwise_sq_dist(a, a);
  Var<T> dab = pairwise_sq_dist(a, b);
  Var<T> dbb = pairwise_sq_dist(b, b);
  auto kernel_sum = [&](const Var<T>& dist) {
    Var<T> acc;
    for (double m : kernel.multipliers) {
      Var<T> k = exp(scale(dist, static_cast<T>(-1.0 / (2.0 * m * base))));
      acc = acc.valid() ? add(acc, k) : k;
    }
    return acc;
  };
  Var<T> within_a = mean(kernel_sum(daa));
  Var<T> cross = mean(kernel_sum(dab));
  Var<T> within_b = mean(kernel_sum(dbb));
  return add(sub(within_a, scale(cross, T{2})), within_b);
}

template <typename T>
Var<T> correction_alignment_loss(const Var<T>& source, const Var<T>& target_corrected, const KernelConfig& kernel,
                                 BandwidthPin* pin) {
  return mmd(source, target_corrected, kernel, pin);
}

SubsetSample sample_subset(std::span<const Label> labels, double p_subset, std::size_t num_classes, Rng& rng) {
  if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
  for (Label y : labels) {
    if (y >= num_classes) throw std::out_of_range("label " + std::to_string(y) + " outside [0, num_classes)");
  }
  const double prob = p_subset / static_cast<double>(num_classes);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  SubsetSample out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (coin(rng) < prob) out.indices.push_back(i);
  }
  return out;
}

template <typename T>
Var<T> source_regularization_loss(const Var<T>& source, const Var<T>& source_corrected,
                                  std::span<const Label> labels, const SubsetSample& subset,
                                  std::size_t num_classes, const KernelConfig& kernel, BandwidthPin* pin) {
  Tape<T>& tape = source.tape();
  const std::size_t n = source.shape().at(0);
  if (labels.size() != n || source_corrected.shape().at(0) != n) {
    throw ShapeError("regularisation inputs disagree on batch size: features " + shape_string(source.shape()) +
                     ", corrected " + shape_string(source_corrected.shape()) + ", " + std::to_string(labels.size()) +
                     " labels");
  }
  for (std::size_t idx : subset.indices) {
    if (idx >= n) throw std::out_of_range("subset index " + std::to_string(idx) + " outside a batch of " + std::to_string(n));
  }
  if (subset.realized_size() == 0) return tape.constant(Tensor<T>::scalar(T{0}));

  Var<T> subset_rows = gather_rows(source_corrected, std::span<const std::size_t>(subset.indices));
  Var<T> total;
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == k) members.push_back(i);
    }
    if (members.empty()) continue;
    Var<T> term = mmd(gather_rows(source, std::span<const std::size_t>(members)), subset_rows, kernel, pin);
    total = total.valid() ? add(total, term) : term;
  }
  return total.valid() ? total : tape.constant(Tensor<T>::scalar(T{0}));
}

template <typename T>
Var<T> cross_entropy(const Var<T>& probs, std::span<const Label> labels) {
  const Tensor<T>& p = probs.value();
  require_simplex(p, 1e-5, "cross_entropy");
  const std::size_t n = p.dim(0), k = p.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy got " + std::to_string(labels.size()) + " labels for " + shape_string(p.shape()));
  }
  Tensor<T> onehot({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside " + std::to_string(k) + " classes");
    }
    onehot[i * k + labels[i]] = T{1};
  }
  Var<T> picked = sum(mul(probs.tape().constant(std::move(onehot)), log(probs)));
  return scale(picked, static_cast<T>(-1.0 / static_cast<double>(n)));
}

template <typename T>
Var<T> target_entropy(const Var<T>& probs) {
  require_simplex(probs.value(), 1e-5, "target_entropy");
  const double n = static_cast<double>(probs.value().dim(0));
  return scale(sum(mul(probs, log(probs))), static_cast<T>(-1.0 / n));
}

#define DCAN_INSTANTIATE_LOSSES(T)                                                                                   \
  template double median_pairwise_sq_dist(const Tensor<T>&, const Tensor<T>&);                                       \
  template Var<T> mmd(const Var<T>&, const Var<T>&, const KernelConfig&, BandwidthPin*);                             \
  template Var<T> correction_alignment_loss(const Var<T>&, const Var<T>&, const KernelConfig&, BandwidthPin*);       \
  template Var<T> source_regularization_loss(const Var<T>&, const Var<T>&, std::span<const Label>,                  \
                                             const SubsetSample&, std::size_t, const KernelConfig&, BandwidthPin*); \
  template Var<T> cross_entropy(const Var<T>&, std::span<const Label>);                                              \
  template Var<T> target_entropy(const Var<T>&);

DCAN_INSTANTIATE_LOSSES(float)
DCAN_INSTANTIATE_LOSSES(double)

}  // namespace dcan::loss
