// SPDX-License-Identifier: Apache-2.0
//
// SGD-with-momentum training of a DcanModel on a domain pair, evaluation,
// and checkpointing.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcan/data.hpp"
#include "dcan/losses.hpp"
#include "dcan/model.hpp"

namespace dcan::model {
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
}  // namespace dcan::model

namespace dcan::train {

struct GroupMultipliers {
  double backbone = 1.0;
  double classifier = 10.0;
  double correction = 0.1;

  bool operator==(const GroupMultipliers&) const = default;
};

struct TrainConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  std::size_t total_steps = 480;  ///< about 30 epochs of the default 500-image source set
  std::size_t batch_size = 32;  ///< per domain
  loss::LossWeights weights;
  loss::KernelConfig kernel;
  std::uint64_t seed = 0;
  double schedule_a = 10.0;
  double schedule_b = 0.75;
  GroupMultipliers multipliers;
  /// Evaluate every this many steps (0: only after the last step).
  std::size_t eval_interval = 0;
  model::Variant variant = model::Variant::full;
  model::ModelConfig model;
  model::InferencePath inference = model::InferencePath::corrected;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct GroupRates {
  double backbone = 0.0;
  double classifier = 0.0;
  double correction = 0.0;

  double of(ParamGroup g) const;
};

/// eta_p = base_lr * (1 + a p)^(-b), scaled by each group's multiplier.
GroupRates lr_at(double progress, const TrainConfig& config);

/// Momentum buffers, one per parameter, zero-initialised.
template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> buffers;

  static OptimizerState zeros_like(const nn::ParamRefs<T>& params);
};

/// Classical momentum: buf = momentum * buf + grad; value -= rate * buf.
template <typename T>
void sgd_step(const nn::ParamRefs<T>& params, OptimizerState<T>& state, const GroupRates& rates, double momentum);

/// Fraction of correct predictions over a labelled split, in batches.
template <typename T>
double evaluate(model::DcanModel<T>& model, const data::Dataset& split, Domain domain, std::size_t batch_size,
                model::InferencePath path = model::InferencePath::corrected);

struct MetricsRow {
  std::size_t step = 0;  ///< completed optimisation steps
  model::LossBreakdown losses;
  double src_acc = 0.0;
  double tgt_acc = 0.0;
  double wall_seconds = 0.0;  ///< side channel; never written to metrics.csv
};

/// Model, optimiser and position of a run. Everything else is derived from
/// the config, so this is all a checkpoint stores.
struct TrainState {
  model::DcanModel<float> model;
  OptimizerState<float> optimizer;
  std::size_t step = 0;

  explicit TrainState(const TrainConfig& config);
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<model::LossBreakdown> history;  ///< one entry per executed step
};

struct TrainOptions {
  /// Stop once this many steps are complete (default: total_steps).
  std::optional<std::size_t> stop_at;
  std::function<void(const MetricsRow&)> on_metrics;
};

/// Raised when a loss component is not finite; the message names the step
/// and lists every component.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::size_t step, const model::LossBreakdown& losses);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Continues `state` from its current step. `pair` is the training view:
/// target_train labels are never read. Test splits must be labelled.
TrainResult train(TrainState& state, const TrainConfig& config, const data::DomainPair& pair,
                  const TrainOptions& options = {});

/// Seed of the subset sampler for one step.
std::uint64_t step_seed(std::uint64_t seed, std::size_t step);

// Metrics files --------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "step,L_s,L_M1,L_reg1,L_M2,L_reg2,L_e,total,src_acc,tgt_acc";
std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
nlohmann::json summary_json(const TrainConfig& config, const TrainState& state, const TrainResult& result);

// Checkpoints ----------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::string field, const std::string& message)
      : std::runtime_error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "DCKP", u32 version, u32-length-prefixed JSON config echo, u64 step,
/// u32 array count, then per array: u32-length-prefixed name, u32 element
/// count, little-endian f32 payload. Arrays cover parameters, momentum
/// buffers and the frozen normalisation statistics.
std::vector<std::uint8_t> encode_checkpoint(TrainState& state, const TrainConfig& config);
void save_checkpoint(const std::filesystem::path& path, TrainState& state, const TrainConfig& config);

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

/// Restores a checkpoint. With `expected`, the stored model configuration and
/// variant must match it; a mismatch names the differing field.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainConfig* expected = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig* expected = nullptr);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace dcan::train
