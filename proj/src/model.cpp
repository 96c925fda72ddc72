// SPDX-License-Identifier: Apache-2.0

#include "dcan/model.hpp"

#include <array>
#include <numeric>

namespace dcan::model {

namespace {

constexpr std::array kVariants{Variant::full,         Variant::source_only,  Variant::no_ca,     Variant::no_lm_lreg_1,
                               Variant::no_lm_lreg_2, Variant::no_lreg_1,    Variant::no_lreg_2, Variant::no_entropy};

std::size_t layer_index(Variant v, std::size_t layer, std::size_t layers) {
  if (layer >= layers) {
    throw std::invalid_argument("variant " + std::string(to_string(v)) + " disables correction layer " +
                                std::to_string(layer + 1) + " but only " + std::to_string(layers) + " exist");
  }
  return layer;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::source_only: return "source_only";
    case Variant::no_ca: return "no_ca";
    case Variant::no_lm_lreg_1: return "no_lm_lreg_1";
    case Variant::no_lm_lreg_2: return "no_lm_lreg_2";
    case Variant::no_lreg_1: return "no_lreg_1";
    case Variant::no_lreg_2: return "no_lreg_2";
    case Variant::no_entropy: return "no_entropy";
  }
  return "unknown";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : kVariants) {
    if (to_string(v) == text) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(text) + "'");
}

std::span<const Variant> all_variants() { return kVariants; }

bool ties_attention(Variant v) { return v == Variant::no_ca || v == Variant::source_only; }

bool has_corrections(Variant v) { return v != Variant::source_only; }

loss::TermMask term_mask(Variant v, std::size_t layers) {
  loss::TermMask mask = loss::TermMask::all(layers);
  switch (v) {
    case Variant::full:
    case Variant::no_ca: break;
    case Variant::source_only: mask = loss::TermMask::none(layers); break;
    case Variant::no_lm_lreg_1:
    case Variant::no_lm_lreg_2: {
      const std::size_t l = layer_index(v, v == Variant::no_lm_lreg_1 ? 0 : 1, layers);
      mask.alignment[l] = false;
      mask.regularization[l] = false;
      break;
    }
    case Variant::no_lreg_1:
    case Variant::no_lreg_2: mask.regularization[layer_index(v, v == Variant::no_lreg_1 ? 0 : 1, layers)] = false; break;
    case Variant::no_entropy: mask.entropy = false; break;
  }
  return mask;
}

std::string_view to_string(InferencePath p) { return p == InferencePath::corrected ? "corrected" : "uncorrected"; }

InferencePath parse_inference_path(std::string_view text) {
  if (text == "corrected") return InferencePath::corrected;
  if (text == "uncorrected") return InferencePath::uncorrected;
  throw std::invalid_argument("unknown inference path '" + std::string(text) + "'");
}

// ModelConfig ----------------------------------------------------------------

std::size_t ModelConfig::effective_ratio(std::size_t channels) const {
  return std::max<std::size_t>(1, std::min(attention_ratio, channels / 4));
}

void ModelConfig::validate() const {
  auto positive = [](const char* field, std::size_t v) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  positive("in_channels", in_channels);
  positive("height", height);
  positive("width", width);
  positive("blocks_per_stage", blocks_per_stage);
  positive("attention_ratio", attention_ratio);
  positive("stem_stride", stem_stride);
  if (stage_widths.empty()) throw ConfigError("stage_widths", "needs at least one stage");
  for (std::size_t c : stage_widths) {
    if (c < 4) throw ConfigError("stage_widths", "every width must be at least 4, got " + std::to_string(c));
    const std::size_t r = effective_ratio(c);
    if (c % r != 0) {
      throw ConfigError("stage_widths", "width " + std::to_string(c) + " is not divisible by its attention ratio " +
                                            std::to_string(r));
    }
  }
  if (num_classes < 2) throw ConfigError("num_classes", "needs at least 2 classes");
  if (correction_layers != 2) {
    throw ConfigError("correction_layers", "exactly 2 correction layers (pooled, softmax) are supported");
  }
  const std::size_t factor = stem_stride << (stage_widths.size() - 1);
  if (height % factor != 0) {
    throw ConfigError("height", "must be divisible by " + std::to_string(factor) + ", got " + std::to_string(height));
  }
  if (width % factor != 0) {
    throw ConfigError("width", "must be divisible by " + std::to_string(factor) + ", got " + std::to_string(width));
  }
}

// DcanModel ------------------------------------------------------------------

template <typename T>
DcanModel<T>::DcanModel(const ModelConfig& config, Variant variant, std::uint64_t seed)
    : config_(config), variant_(variant) {
  config_.validate();
  Rng rng(seed);
  const bool tied = ties_attention(variant);
  const std::size_t s = config_.stem_stride;
  stem_ = nn::Conv2d<T>("stem", config_.in_channels, config_.stage_widths.front(), s + 2, s, 1, rng);
  stem_norm_ = nn::FrozenNorm<T>("stem_norm", config_.stage_widths.front());
  std::size_t in = config_.stage_widths.front();
  for (std::size_t stage = 0; stage < config_.stage_widths.size(); ++stage) {
    const std::size_t out = config_.stage_widths[stage];
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string prefix = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(b + 1);
      blocks_.emplace_back(prefix, in, out, stride, config_.effective_ratio(out), tied, rng);
      in = out;
    }
  }
  const std::size_t d = config_.feature_width();
  classifier_ = nn::Linear<T>("classifier", d, config_.num_classes, ParamGroup::classifier, rng);
  if (has_corrections(variant)) {
    correction_pooled_ = std::make_unique<nn::FeatureCorrectionBlock<T>>("correction1", d, rng);
    correction_softmax_ = std::make_unique<nn::FeatureCorrectionBlock<T>>("correction2", config_.num_classes, rng);
  }
}

template <typename T>
ForwardRecord<T> DcanModel<T>::forward(Tape<T>& tape, const Var<T>& batch, Domain domain, bool corrections) {
  const Shape& s = batch.shape();
  const Shape expected{config_.in_channels, config_.height, config_.width};
  if (s.size() != 4 || !std::equal(expected.begin(), expected.end(), s.begin() + 1)) {
    throw ShapeError("model expects [N," + std::to_string(config_.in_channels) + "," + std::to_string(config_.height) +
                     "," + std::to_string(config_.width) + "], got " + shape_string(s));
  }
  ForwardRecord<T> rec;
  Var<T> h = relu(stem_norm_.forward(tape, stem_.forward(tape, batch)));
  const auto last = stage_last_blocks();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto out = blocks_[i].forward(tape, h, domain);
    h = out.features;
    if (std::find(last.begin(), last.end(), i) != last.end()) rec.attention.push_back(out.attention);
  }
  rec.pooled = global_avg_pool(h);
  rec.probs = softmax(classifier_.forward(tape, rec.pooled));
  if (!corrections || !corrected()) {
    rec.pooled_corrected = rec.pooled;
    rec.probs_shifted = rec.probs;
    rec.probs_corrected = rec.probs;
    return rec;
  }
  rec.pooled_corrected = correction_pooled_->forward(tape, rec.pooled).corrected;
  Var<T> chained = softmax(classifier_.forward(tape, rec.pooled_corrected));
  require_simplex(chained.value(), nn::FeatureCorrectionBlock<T>::kSimplexTolerance, "softmax correction");
  rec.probs_shifted = correction_softmax_->forward(tape, chained).corrected;
  Var<T> floored =
      clamp_min(rec.probs_shifted, static_cast<T>(nn::FeatureCorrectionBlock<T>::kProbabilityFloor));
  rec.probs_corrected = div(floored, row_sum(floored));
  return rec;
}

template <typename T>
std::vector<std::size_t> DcanModel<T>::predict(const Tensor<T>& batch, Domain domain, InferencePath path) {
  Tape<T> tape(false);
  const bool use_corrected = domain == Domain::target && path == InferencePath::corrected;
  auto rec = forward(tape, tape.constant(batch), domain, use_corrected);
  const Tensor<T>& probs = use_corrected ? rec.probs_corrected.value() : rec.probs.value();
  const std::size_t n = probs.dim(0);
  const std::size_t k = probs.dim(1);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs.at(i, j) > probs.at(i, best)) best = j;
    }
    labels[i] = best;
  }
  return labels;
}

template <typename T>
std::vector<std::size_t> DcanModel<T>::stage_last_blocks() const {
  std::vector<std::size_t> out;
  for (std::size_t stage = 0; stage < config_.stage_widths.size(); ++stage) {
    out.push_back((stage + 1) * config_.blocks_per_stage - 1);
  }
  return out;
}

template <typename T>
nn::ParamRefs<T> DcanModel<T>::parameters() {
  nn::ParamRefs<T> out;
  stem_.collect(out);
  for (auto& b : blocks_) b.collect(out);
  classifier_.collect(out);
  if (correction_pooled_) correction_pooled_->collect(out);
  if (correction_softmax_) correction_softmax_->collect(out);
  return out;
}

template <typename T>
std::vector<nn::FrozenNorm<T>*> DcanModel<T>::norms() {
  std::vector<nn::FrozenNorm<T>*> out{&stem_norm_};
  for (auto& b : blocks_) b.collect_norms(out);
  return out;
}

template <typename T>
std::size_t DcanModel<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.numel();
  return n;
}

template <typename T>
void DcanModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

// Objective ------------------------------------------------------------------

template <typename T>
StepLosses<T> step_losses(DcanModel<T>& model, Tape<T>& tape, const Tensor<T>& source_batch,
                          std::span<const loss::Label> source_labels, const Tensor<T>& target_batch,
                          const loss::LossWeights& weights, const loss::KernelConfig& kernel, Rng& rng,
                          loss::BandwidthPin* pin) {
  weights.validate();
  if (weights.num_correction_layers != model.config().correction_layers) {
    throw std::invalid_argument("loss weights expect " + std::to_string(weights.num_correction_layers) +
                                " correction layers, model has " + std::to_string(model.config().correction_layers));
  }
  if (source_batch.rank() != 4 || target_batch.rank() != 4) {
    throw ShapeError("step_losses needs rank-4 source and target batches");
  }
  if (source_labels.size() != source_batch.dim(0)) {
    throw std::invalid_argument("source batch has " + std::to_string(source_batch.dim(0)) + " samples but " +
                                std::to_string(source_labels.size()) + " labels");
  }
  const std::size_t layers = weights.num_correction_layers;
  const std::size_t classes = model.config().num_classes;
  StepLosses<T> out;
  out.source = model.forward(tape, tape.constant(source_batch), Domain::source);
  Var<T> ce = loss::cross_entropy(out.source.probs, source_labels);
  out.values.source_ce = ce.item();
  out.values.per_layer.assign(layers, {0.0, 0.0});

  if (!model.corrected()) {
    // No target path is trained; the objective is the plain source loss.
    out.total = ce;
    out.values.total = ce.item();
    return out;
  }

  out.target = model.forward(tape, tape.constant(target_batch), Domain::target);
  const ForwardRecord<T>& src = out.source;
  const ForwardRecord<T>& tgt = *out.target;
  const std::array<std::pair<Var<T>, Var<T>>, 2> source_pairs{{{src.pooled, src.pooled_corrected},
                                                               {src.probs, src.probs_corrected}}};
  const std::array<Var<T>, 2> target_corrected{tgt.pooled_corrected, tgt.probs_corrected};

  std::vector<loss::LayerTerms<Var<T>>> terms;
  for (std::size_t l = 0; l < layers; ++l) {
    Var<T> align = loss::correction_alignment_loss(source_pairs[l].first, target_corrected[l], kernel, pin);
    const loss::SubsetSample subset = loss::sample_subset(source_labels, weights.p_subset, classes, rng);
    Var<T> reg = loss::source_regularization_loss(source_pairs[l].first, source_pairs[l].second, source_labels,
                                                  subset, classes, kernel, pin);
    out.values.per_layer[l] = {static_cast<double>(align.item()), static_cast<double>(reg.item())};
    terms.push_back({align, reg});
  }
  Var<T> entropy = loss::target_entropy(tgt.probs_corrected);
  out.values.entropy = entropy.item();
  out.total = loss::total_objective<Var<T>>(ce, terms, entropy, weights, term_mask(model.variant(), layers));
  out.values.total = out.total.item();
  return out;
}

#define DCAN_INSTANTIATE_MODEL(T)                                                                               \
  template class DcanModel<T>;                                                                                  \
  template StepLosses<T> step_losses(DcanModel<T>&, Tape<T>&, const Tensor<T>&, std::span<const loss::Label>, \
                                     const Tensor<T>&, const loss::LossWeights&, const loss::KernelConfig&,     \
                                     Rng&, loss::BandwidthPin*);

DCAN_INSTANTIATE_MODEL(float)
DCAN_INSTANTIATE_MODEL(double)

}  // namespace dcan::model
