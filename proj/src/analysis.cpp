// SPDX-License-Identifier: Apache-2.0

#include "dcan/analysis.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace dcan::analysis {

using nlohmann::json;

std::string_view to_string(AttentionInputs inputs) {
  return inputs == AttentionInputs::shared ? "shared" : "respective";
}

AttentionInputs parse_attention_inputs(std::string_view text) {
  if (text == "shared") return AttentionInputs::shared;
  if (text == "respective") return AttentionInputs::respective;
  throw std::invalid_argument("unknown attention input mode '" + std::string(text) +
                              "' (expected shared or respective)");
}

namespace {

// Per-stage channel sums of v over every image of `sets`, pushed through one route.
std::vector<std::vector<double>> attention_sums(model::DcanModel<float>& model,
                                                std::span<const data::Dataset* const> sets, Domain route,
                                                std::size_t batch_size, std::size_t& count) {
  std::vector<std::vector<double>> sums;
  count = 0;
  std::vector<std::size_t> rows;
  for (const data::Dataset* set : sets) {
    for (std::size_t start = 0; start < set->size(); start += batch_size) {
      rows.clear();
      for (std::size_t i = start; i < std::min(start + batch_size, set->size()); ++i) rows.push_back(i);
      Tape<float> tape(false);
      auto rec = model.forward(tape, tape.constant(set->gather_images(rows)), route, false);
      if (sums.empty()) {
        for (const auto& v : rec.attention) sums.emplace_back(v.value().dim(1), 0.0);
      }
      for (std::size_t s = 0; s < rec.attention.size(); ++s) {
        const Tensor<float>& v = rec.attention[s].value();
        for (std::size_t n = 0; n < v.dim(0); ++n) {
          for (std::size_t c = 0; c < v.dim(1); ++c) sums[s][c] += v.at(n, c);
        }
      }
      count += rows.size();
    }
  }
  return sums;
}

}  // namespace

AttentionDiffReport attention_difference(model::DcanModel<float>& model, const data::DomainPair& pair,
                                         AttentionInputs inputs, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("attention_difference: batch_size must be positive");
  if (pair.source_train.size() == 0 || pair.target_train.size() == 0) {
    throw std::invalid_argument("attention_difference needs non-empty training sets");
  }
  const std::array<const data::Dataset*, 2> both{&pair.source_train, &pair.target_train};
  const std::array<const data::Dataset*, 1> src_only{&pair.source_train};
  const std::array<const data::Dataset*, 1> tgt_only{&pair.target_train};
  const bool shared = inputs == AttentionInputs::shared;

  std::size_t n_s = 0, n_t = 0;
  auto sum_s = attention_sums(model, shared ? std::span<const data::Dataset* const>(both) : src_only,
                              Domain::source, batch_size, n_s);
  auto sum_t = attention_sums(model, shared ? std::span<const data::Dataset* const>(both) : tgt_only,
                              Domain::target, batch_size, n_t);

  AttentionDiffReport report;
  report.inputs = inputs;
  for (std::size_t s = 0; s < sum_s.size(); ++s) {
    StageAttentionDiff stage;
    stage.stage = s;
    stage.channels = sum_s[s].size();
    stage.difference.resize(stage.channels);
    double total = 0.0;
    for (std::size_t c = 0; c < stage.channels; ++c) {
      const double d = std::abs(sum_s[s][c] / static_cast<double>(n_s) - sum_t[s][c] / static_cast<double>(n_t));
      stage.difference[c] = d;
      total += d;
      stage.max = std::max(stage.max, d);
    }
    stage.mean = stage.channels ? total / static_cast<double>(stage.channels) : 0.0;
    report.stages.push_back(std::move(stage));
  }
  return report;
}

void to_json(json& j, const AttentionDiffReport& r) {
  json stages = json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"stage", s.stage},
                      {"channels", s.channels},
                      {"difference", s.difference},
                      {"mean", s.mean},
                      {"max", s.max}});
  }
  j = json{{"inputs", to_string(r.inputs)}, {"stages", std::move(stages)}};
}

void write_gnuplot_matrix(std::ostream& out, const AttentionDiffReport& r) {
  std::size_t widest = 0;
  for (const auto& s : r.stages) widest = std::max(widest, s.channels);
  char buf[40];
  for (const auto& s : r.stages) {
    for (std::size_t c = 0; c < widest; ++c) {
      if (c) out << ' ';
      if (c < s.channels) {
        std::snprintf(buf, sizeof buf, "%.9g", s.difference[c]);
        out << buf;
      } else {
        out << "NaN";
      }
    }
    out << '\n';
  }
}

// Ablation -------------------------------------------------------------------

const AblationRow& AblationReport::row(model::Variant v) const {
  for (const auto& r : rows) {
    if (r.variant == v) return r;
  }
  throw std::out_of_range("ablation report has no row for variant " + std::string(model::to_string(v)));
}

namespace {

std::optional<double> mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

AblationReport run_ablation(std::span<const AblationTask> tasks, const train::TrainConfig& base,
                            std::span<const model::Variant> variants, std::span<const std::uint64_t> seeds,
                            const AblationOptions& options) {
  if (tasks.empty()) throw std::invalid_argument("run_ablation needs at least one task");
  if (variants.empty()) throw std::invalid_argument("run_ablation needs at least one variant");
  if (seeds.empty()) throw std::invalid_argument("run_ablation needs at least one seed");

  AblationReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (const auto& t : tasks) report.tasks.push_back(t.name);
  for (model::Variant v : variants) {
    AblationRow row;
    row.variant = v;
    row.task_means.resize(tasks.size());
    report.rows.push_back(std::move(row));
  }

  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    std::optional<data::DomainPair> pair;
    std::string data_error;
    try {
      pair = data::generate_domain_pair(tasks[ti].spec);
      pair->target_train = pair->target_train.without_labels();
    } catch (const std::exception& e) {
      data_error = std::string("data generation failed: ") + e.what();
    }
    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
      std::vector<double> accs;
      for (std::uint64_t seed : seeds) {
        AblationCell cell;
        cell.variant = variants[vi];
        cell.task = tasks[ti].name;
        cell.seed = seed;
        const auto start = std::chrono::steady_clock::now();
        if (!pair) {
          cell.error = data_error;
        } else {
          try {
            train::TrainConfig cfg = base;
            cfg.variant = variants[vi];
            cfg.seed = seed;
            if (cfg.model.num_classes != tasks[ti].spec.num_classes) {
              throw std::invalid_argument("model.num_classes " + std::to_string(cfg.model.num_classes) +
                                          " does not match the task's " +
                                          std::to_string(tasks[ti].spec.num_classes) + " classes");
            }
            train::TrainState state(cfg);
            train::train(state, cfg, *pair);
            cell.target_accuracy =
                train::evaluate(state.model, pair->target_test, Domain::target, cfg.batch_size, cfg.inference);
            cell.source_accuracy =
                train::evaluate(state.model, pair->source_test, Domain::source, cfg.batch_size, cfg.inference);
            accs.push_back(*cell.target_accuracy);
          } catch (const std::exception& e) {
            cell.error = e.what();
          }
        }
        cell.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!cell.error.empty()) {
          report.rows[vi].failures.push_back(cell.task + "/seed " + std::to_string(seed) + ": " + cell.error);
        }
        if (options.on_cell) options.on_cell(cell);
        report.cells.push_back(std::move(cell));
      }
      report.rows[vi].task_means[ti] = mean_of(accs);
    }
  }

  for (auto& row : report.rows) {
    std::vector<double> means;
    for (const auto& m : row.task_means) {
      if (m) means.push_back(*m);
    }
    if (means.size() == row.task_means.size()) row.average = mean_of(means);
  }
  return report;
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void to_json(json& j, const AblationReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json per_task = json::object();
    for (std::size_t t = 0; t < r.tasks.size(); ++t) per_task[r.tasks[t]] = optional_json(row.task_means[t]);
    rows.push_back({{"variant", model::to_string(row.variant)},
                    {"target_accuracy", std::move(per_task)},
                    {"average", optional_json(row.average)},
                    {"failures", row.failures}});
  }
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"variant", model::to_string(c.variant)},
                     {"task", c.task},
                     {"seed", c.seed},
                     {"target_accuracy", optional_json(c.target_accuracy)},
                     {"source_accuracy", optional_json(c.source_accuracy)},
                     {"error", c.error}});
  }
  j = json{{"tasks", r.tasks}, {"seeds", r.seeds}, {"rows", std::move(rows)}, {"cells", std::move(cells)}};
}

void write_ablation_csv(std::ostream& out, const AblationReport& r) {
  out << "variant";
  for (const auto& t : r.tasks) out << ',' << t;
  out << ",average,failed_runs\n";
  char buf[40];
  auto cell = [&](const std::optional<double>& v) {
    if (!v) return std::string();
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (const auto& row : r.rows) {
    out << model::to_string(row.variant);
    for (const auto& m : row.task_means) out << ',' << cell(m);
    out << ',' << cell(row.average) << ',' << row.failures.size() << '\n';
  }
}

}  // namespace dcan::analysis
