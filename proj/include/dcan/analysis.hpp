// SPDX-License-Identifier: Apache-2.0
//
// Post-training studies: per-channel attention differences between the two
// domain routes, and the variant-by-seed ablation grid.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dcan/data.hpp"
#include "dcan/model.hpp"
#include "dcan/trainer.hpp"

namespace dcan::analysis {

// Attention difference -------------------------------------------------------

/// Which images feed the two routes.
///  - shared: both routes see the union of the two training sets, so the
///    report isolates what the domain-specific reduction weights change and
///    is exactly zero whenever the routes are equal.
///  - respective: source route on source images, target route on target
///    images; differences then also carry the input shift.
enum class AttentionInputs : std::uint8_t { shared, respective };

std::string_view to_string(AttentionInputs inputs);
AttentionInputs parse_attention_inputs(std::string_view text);

struct StageAttentionDiff {
  std::size_t stage = 0;
  std::size_t channels = 0;
  std::vector<double> difference;  ///< |mean v_source - mean v_target| per channel
  double mean = 0.0;
  double max = 0.0;
};

struct AttentionDiffReport {
  AttentionInputs inputs = AttentionInputs::shared;
  std::vector<StageAttentionDiff> stages;
};

/// Averages the attention of the last block of every stage over the training
/// images (labels are not used) and reports per-channel absolute differences.
AttentionDiffReport attention_difference(model::DcanModel<float>& model, const data::DomainPair& pair,
                                         AttentionInputs inputs = AttentionInputs::shared,
                                         std::size_t batch_size = 64);

void to_json(nlohmann::json& j, const AttentionDiffReport& r);

/// One row per stage, one column per channel, `NaN` padding up to the widest
/// stage; loads directly with gnuplot's `matrix` keyword.
void write_gnuplot_matrix(std::ostream& out, const AttentionDiffReport& r);

// Ablation grid --------------------------------------------------------------

struct AblationTask {
  std::string name;
  data::DomainShiftSpec spec;
};

struct AblationCell {
  model::Variant variant = model::Variant::full;
  std::string task;
  std::uint64_t seed = 0;
  std::optional<double> target_accuracy;
  std::optional<double> source_accuracy;
  std::string error;          ///< empty on success
  double wall_seconds = 0.0;  ///< side channel; not part of any report file
};

struct AblationRow {
  model::Variant variant = model::Variant::full;
  /// Mean target accuracy over the successful seeds of each task.
  std::vector<std::optional<double>> task_means;
  /// Mean of the task means; empty if any task has no successful run.
  std::optional<double> average;
  std::vector<std::string> failures;
};

struct AblationReport {
  std::vector<std::string> tasks;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  ///< one per requested variant, in order
  std::vector<AblationCell> cells;

  const AblationRow& row(model::Variant v) const;
};

struct AblationOptions {
  std::function<void(const AblationCell&)> on_cell;
};

/// Trains every (task, variant, seed) cell from `base`, overriding only the
/// variant and the seed. Datasets are generated once per task from its spec.
/// A failing cell is recorded in its row and the grid continues.
AblationReport run_ablation(std::span<const AblationTask> tasks, const train::TrainConfig& base,
                            std::span<const model::Variant> variants, std::span<const std::uint64_t> seeds,
                            const AblationOptions& options = {});

void to_json(nlohmann::json& j, const AblationReport& r);
/// Header `variant,<task>...,average,failed_runs`; empty cells for missing means.
void write_ablation_csv(std::ostream& out, const AblationReport& r);

}  // namespace dcan::analysis
