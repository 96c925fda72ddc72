// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcan/analysis.hpp"
#include "dcan/data.hpp"
#include "dcan/gradcheck.hpp"
#include "dcan/model.hpp"
#include "dcan/trainer.hpp"

namespace dcan::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (model::Variant v : model::all_variants()) names.emplace_back(model::to_string(v));
  return names;
}

// Parsing a config through from_json applies defaults and rejects unknown
// fields, so a typo never passes silently.
train::TrainConfig load_train_config(const std::string& path) {
  if (path.empty()) return {};
  try {
    return read_json(path).get<train::TrainConfig>();
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

data::DomainShiftSpec load_spec(const std::string& path) {
  if (path.empty()) return {};
  try {
    return read_json(path).get<data::DomainShiftSpec>();
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void require_compatible(const model::ModelConfig& m, const data::DomainPair& pair) {
  const data::Dataset& d = pair.source_train;
  const Shape& s = d.images.shape();
  if (s[1] != m.in_channels || s[2] != m.height || s[3] != m.width) {
    throw std::runtime_error("dataset images are " + shape_string(Shape(s.begin() + 1, s.end())) +
                             " but the model expects [" + std::to_string(m.in_channels) + "," +
                             std::to_string(m.height) + "," + std::to_string(m.width) + "]");
  }
  if (d.num_classes != m.num_classes) {
    throw std::runtime_error("dataset has " + std::to_string(d.num_classes) + " classes but model.num_classes is " +
                             std::to_string(m.num_classes));
  }
}

// gen-data -------------------------------------------------------------------

struct GenDataArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  data::DomainShiftSpec spec = load_spec(a.spec);
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  const auto pair = data::generate_domain_pair(spec);
  data::save_pair(pair, spec, a.out);
  out << "wrote " << pair.source_train.size() << "+" << pair.source_test.size() << " source and "
      << pair.target_train.size() << "+" << pair.target_test.size() << " target images to " << a.out << "\n";
  return 0;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
  std::optional<std::size_t> stop_at;
  std::vector<std::size_t> checkpoint_at;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool quiet = false;
};

int train_cmd(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  const bool have_config = !a.config.empty();
  train::TrainConfig cfg = load_train_config(a.config);
  auto apply_overrides = [&] {
    if (a.variant) cfg.variant = model::parse_variant(*a.variant);
    if (a.seed) cfg.seed = *a.seed;
    if (a.steps) cfg.total_steps = *a.steps;
  };

  std::optional<train::TrainState> state;
  if (!a.resume.empty()) {
    // Without --config the stored config is the base for the overrides.
    train::Checkpoint ck = train::load_checkpoint(a.resume);
    if (!have_config) cfg = ck.config;
    apply_overrides();
    if (have_config || a.variant || a.seed || a.steps) ck = train::load_checkpoint(a.resume, &cfg);
    state.emplace(std::move(ck.state));
  } else {
    apply_overrides();
  }
  cfg.validate();
  const data::DomainPair pair = data::load_training_view(a.data);
  require_compatible(cfg.model, pair);
  if (!state) state.emplace(cfg);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const std::size_t stop = std::min(a.stop_at.value_or(cfg.total_steps), cfg.total_steps);
  std::vector<std::size_t> marks;
  for (std::size_t k : a.checkpoint_at) {
    if (k > state->step && k < stop) marks.push_back(k);
  }
  std::sort(marks.begin(), marks.end());
  marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
  marks.push_back(stop);

  std::vector<train::MetricsRow> rows;
  json timing_rows = json::array();
  train::TrainOptions opts;
  opts.on_metrics = [&](const train::MetricsRow& row) {
    timing_rows.push_back({{"step", row.step}, {"wall_seconds", seconds_since(start)}});
    if (!a.quiet) err << train::format_metrics_row(row) << "\n";
  };
  if (!a.quiet) err << train::kMetricsHeader << "\n";
  for (std::size_t mark : marks) {
    opts.stop_at = mark;
    auto result = train::train(*state, cfg, pair, opts);
    rows.insert(rows.end(), result.metrics.begin(), result.metrics.end());
    if (mark != stop) train::save_checkpoint(dir / ("step_" + std::to_string(mark) + ".dckp"), *state, cfg);
  }

  train::write_metrics_csv(dir / "metrics.csv", rows);
  train::TrainResult all;
  all.metrics = rows;
  write_json(dir / "summary.json", train::summary_json(cfg, *state, all));
  train::save_checkpoint(dir / "final.dckp", *state, cfg);
  write_json(dir / "timing.json", {{"rows", timing_rows}, {"total_seconds", seconds_since(start)}});
  out << "trained " << model::to_string(cfg.variant) << " to step " << state->step << "; outputs in " << a.out << "\n";
  return 0;
}

// eval -----------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::optional<std::string> inference;
};

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  train::Checkpoint ck = train::load_checkpoint(a.ckpt);
  const auto path = a.inference ? model::parse_inference_path(*a.inference) : ck.config.inference;
  const data::DomainPair pair = data::load_pair(a.data);
  require_compatible(ck.config.model, pair);
  const std::size_t batch = ck.config.batch_size;
  json j{{"variant", model::to_string(ck.config.variant)},
         {"step", ck.state.step},
         {"inference", model::to_string(path)},
         {"source_test_accuracy",
          train::evaluate(ck.state.model, pair.source_test, Domain::source, batch, path)},
         {"target_test_accuracy",
          train::evaluate(ck.state.model, pair.target_test, Domain::target, batch, path)}};
  if (!a.out.empty()) write_json(a.out, j);
  out << j.dump(2) << "\n";
  return 0;
}

// ablate ---------------------------------------------------------------------

struct AblateArgs {
  std::string config;
  std::vector<std::string> specs;
  std::vector<std::string> variants{"full", "no_ca", "source_only"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out;
  std::optional<std::size_t> steps;
};

int ablate_cmd(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  train::TrainConfig cfg = load_train_config(a.config);
  if (a.steps) cfg.total_steps = *a.steps;
  cfg.validate();
  std::vector<analysis::AblationTask> tasks;
  if (a.specs.empty()) {
    tasks.push_back({"default", data::DomainShiftSpec{}});
  } else {
    for (const auto& s : a.specs) tasks.push_back({fs::path(s).stem().string(), load_spec(s)});
  }
  std::vector<model::Variant> variants;
  for (const auto& v : a.variants) variants.push_back(model::parse_variant(v));

  json timing = json::array();
  analysis::AblationOptions opts;
  opts.on_cell = [&](const analysis::AblationCell& c) {
    timing.push_back({{"variant", model::to_string(c.variant)},
                      {"task", c.task},
                      {"seed", c.seed},
                      {"wall_seconds", c.wall_seconds}});
    err << c.task << " " << model::to_string(c.variant) << " seed " << c.seed << ": ";
    if (c.error.empty()) {
      err << "target " << *c.target_accuracy << ", source " << *c.source_accuracy << "\n";
    } else {
      err << "FAILED (" << c.error << ")\n";
    }
  };
  const auto report = analysis::run_ablation(tasks, cfg, variants, a.seeds, opts);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::ostringstream csv;
  analysis::write_ablation_csv(csv, report);
  write_text(dir / "ablation.csv", csv.str());
  write_json(dir / "ablation.json", report);
  write_json(dir / "timing.json", {{"cells", timing}, {"total_seconds", seconds_since(start)}});
  out << csv.str();
  return 0;
}

// attn-diff ------------------------------------------------------------------

struct AttnArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string matrix;
  std::string inputs = "shared";
  std::size_t batch = 64;
};

int attn_cmd(const AttnArgs& a, std::ostream& out) {
  train::Checkpoint ck = train::load_checkpoint(a.ckpt);
  const data::DomainPair pair = data::load_training_view(a.data);
  require_compatible(ck.config.model, pair);
  const auto report =
      analysis::attention_difference(ck.state.model, pair, analysis::parse_attention_inputs(a.inputs), a.batch);
  write_json(a.out, report);
  if (!a.matrix.empty()) {
    std::ostringstream m;
    analysis::write_gnuplot_matrix(m, report);
    write_text(a.matrix, m.str());
  }
  for (const auto& s : report.stages) {
    out << "stage " << s.stage << ": " << s.channels << " channels, mean " << s.mean << ", max " << s.max << "\n";
  }
  return 0;
}

// grad-check -----------------------------------------------------------------

int grad_check_cmd(const std::string& dtype, std::uint64_t seed, std::ostream& out) {
  const auto results = parse_dtype(dtype) == DType::f64 ? gradcheck::run_suite<double>(seed)
                                                        : gradcheck::run_suite<float>(seed);
  bool ok = true;
  char line[160];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-40s max_rel_err %.3e  tol %.0e  checked %3zu  skipped %2zu  %s\n",
                  r.name.c_str(), r.max_rel_error, r.tolerance, r.checked, r.skipped, r.passed() ? "ok" : "FAIL");
    out << line;
    ok = ok && r.passed();
  }
  out << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale domain-conditioned channel attention networks for unsupervised domain adaptation.",
               "dcan"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic source/target domain pair");
  gen_cmd->add_option("--spec", gen.spec, "DomainShiftSpec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Override the DomainShiftSpec seed");

  TrainArgs tr;
  auto* train_sub = app.add_subcommand("train", "Train one model and write metrics, summary and checkpoint");
  train_sub->add_option("--data", tr.data, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
  train_sub->add_option("--config", tr.config, "TrainConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
  train_sub->add_option("--out", tr.out, "Run directory")->required();
  train_sub->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_sub->add_option("--stop-at", tr.stop_at, "Stop once this many steps are complete");
  train_sub->add_option("--checkpoint-at", tr.checkpoint_at, "Also write step_<k>.dckp at these steps");
  train_sub->add_option("--variant", tr.variant, "Override the variant")->check(CLI::IsMember(variant_names()));
  train_sub->add_option("--seed", tr.seed, "Override the seed");
  train_sub->add_option("--steps", tr.steps, "Override total_steps");
  train_sub->add_flag("--quiet", tr.quiet, "Do not echo metrics rows to stderr");

  EvalArgs ev;
  auto* eval_sub = app.add_subcommand("eval", "Evaluate a checkpoint on the test splits");
  eval_sub->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_sub->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_sub->add_option("--out", ev.out, "Also write the JSON result here");
  eval_sub->add_option("--inference", ev.inference, "Target inference path")
      ->check(CLI::IsMember({"corrected", "uncorrected"}));

  AblateArgs ab;
  auto* ablate_sub = app.add_subcommand("ablate", "Train a variant x seed grid and report target accuracies");
  ablate_sub->add_option("--config", ab.config, "Base TrainConfig JSON")->check(CLI::ExistingFile);
  ablate_sub->add_option("--spec", ab.specs, "DomainShiftSpec JSON per task (repeatable; default spec if none)")
      ->check(CLI::ExistingFile);
  ablate_sub->add_option("--variants", ab.variants, "Variants to train")
      ->delimiter(',')
      ->check(CLI::IsMember(variant_names()))
      ->capture_default_str();
  ablate_sub->add_option("--seeds", ab.seeds, "Training seeds")->delimiter(',')->capture_default_str();
  ablate_sub->add_option("--steps", ab.steps, "Override total_steps");
  ablate_sub->add_option("--out", ab.out, "Output directory")->required();

  AttnArgs at;
  auto* attn_sub = app.add_subcommand("attn-diff", "Per-channel attention difference between the domain routes");
  attn_sub->add_option("--ckpt", at.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  attn_sub->add_option("--data", at.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  attn_sub->add_option("--out", at.out, "Report JSON")->required();
  attn_sub->add_option("--matrix", at.matrix, "Also write a gnuplot matrix (stages x channels)");
  attn_sub->add_option("--inputs", at.inputs, "Images fed to both routes")
      ->check(CLI::IsMember({"shared", "respective"}))
      ->capture_default_str();
  attn_sub->add_option("--batch", at.batch, "Forward batch size")->check(CLI::PositiveNumber)->capture_default_str();

  std::string dtype = "f64";
  std::uint64_t gc_seed = 0;
  auto* gc_sub = app.add_subcommand("grad-check", "Finite-difference verification of every gradient");
  gc_sub->add_option("--dtype", dtype, "Precision")->check(CLI::IsMember({"f64", "f32"}))->capture_default_str();
  gc_sub->add_option("--seed", gc_seed, "Seed of the random test inputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const CLI::App* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return 2;
  }

  try {
    if (*gen_cmd) return gen_data(gen, out);
    if (*train_sub) return train_cmd(tr, out, err);
    if (*eval_sub) return eval_cmd(ev, out);
    if (*ablate_sub) return ablate_cmd(ab, out, err);
    if (*attn_sub) return attn_cmd(at, out);
    if (*gc_sub) return grad_check_cmd(dtype, gc_seed, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dcan::cli
