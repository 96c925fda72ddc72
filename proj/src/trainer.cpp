// SPDX-License-Identifier: Apache-2.0

#include "dcan/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dcan::train {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument(where + ": unknown field '" + key + "'");
  }
}

namespace {

json weights_json(const loss::LossWeights& w) {
  return {{"alpha", w.alpha}, {"beta", w.beta}, {"p_subset", w.p_subset},
          {"num_correction_layers", w.num_correction_layers}};
}

loss::LossWeights weights_from(const json& j) {
  reject_unknown(j, {"alpha", "beta", "p_subset", "num_correction_layers"}, "weights");
  loss::LossWeights d, w;
  w.alpha = j.value("alpha", d.alpha);
  w.beta = j.value("beta", d.beta);
  w.p_subset = j.value("p_subset", d.p_subset);
  w.num_correction_layers = j.value("num_correction_layers", d.num_correction_layers);
  return w;
}

json kernel_json(const loss::KernelConfig& k) {
  return {{"bandwidth", k.bandwidth == loss::KernelConfig::Bandwidth::fixed ? "fixed" : "median_heuristic_multi"},
          {"multipliers", k.multipliers},
          {"fixed_base", k.fixed_base}};
}

loss::KernelConfig kernel_from(const json& j) {
  reject_unknown(j, {"bandwidth", "multipliers", "fixed_base"}, "kernel");
  loss::KernelConfig k;
  const std::string mode = j.value("bandwidth", std::string("median_heuristic_multi"));
  if (mode == "fixed") {
    k.bandwidth = loss::KernelConfig::Bandwidth::fixed;
  } else if (mode != "median_heuristic_multi") {
    throw std::invalid_argument("kernel.bandwidth: unknown mode '" + mode + "'");
  }
  k.multipliers = j.value("multipliers", k.multipliers);
  k.fixed_base = j.value("fixed_base", k.fixed_base);
  return k;
}

bool finite(const model::LossBreakdown& b) {
  if (!std::isfinite(b.source_ce) || !std::isfinite(b.entropy) || !std::isfinite(b.total)) return false;
  for (const auto& t : b.per_layer) {
    if (!std::isfinite(t.alignment) || !std::isfinite(t.regularization)) return false;
  }
  return true;
}

std::string describe(const model::LossBreakdown& b) {
  std::ostringstream os;
  os << "L_s=" << b.source_ce;
  for (std::size_t l = 0; l < b.per_layer.size(); ++l) {
    os << " L_M" << l + 1 << "=" << b.per_layer[l].alignment << " L_reg" << l + 1 << "=" << b.per_layer[l].regularization;
  }
  os << " L_e=" << b.entropy << " total=" << b.total;
  return os.str();
}

}  // namespace

// Config ---------------------------------------------------------------------

void to_json(json& j, const TrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"momentum", c.momentum},
           {"total_steps", c.total_steps},
           {"batch_size", c.batch_size},
           {"weights", weights_json(c.weights)},
           {"kernel", kernel_json(c.kernel)},
           {"seed", c.seed},
           {"schedule_a", c.schedule_a},
           {"schedule_b", c.schedule_b},
           {"multipliers",
            {{"backbone", c.multipliers.backbone},
             {"classifier", c.multipliers.classifier},
             {"correction", c.multipliers.correction}}},
           {"eval_interval", c.eval_interval},
           {"variant", std::string(model::to_string(c.variant))},
           {"model", c.model},
           {"inference", std::string(model::to_string(c.inference))}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"base_lr", "momentum", "total_steps", "batch_size", "weights", "kernel", "seed", "schedule_a",
                  "schedule_b", "multipliers", "eval_interval", "variant", "model", "inference"},
                 "TrainConfig");
  TrainConfig d;
  c.base_lr = j.value("base_lr", d.base_lr);
  c.momentum = j.value("momentum", d.momentum);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.weights = j.contains("weights") ? weights_from(j.at("weights")) : d.weights;
  c.kernel = j.contains("kernel") ? kernel_from(j.at("kernel")) : d.kernel;
  c.seed = j.value("seed", d.seed);
  c.schedule_a = j.value("schedule_a", d.schedule_a);
  c.schedule_b = j.value("schedule_b", d.schedule_b);
  c.multipliers = d.multipliers;
  if (j.contains("multipliers")) {
    const json& m = j.at("multipliers");
    reject_unknown(m, {"backbone", "classifier", "correction"}, "multipliers");
    c.multipliers.backbone = m.value("backbone", d.multipliers.backbone);
    c.multipliers.classifier = m.value("classifier", d.multipliers.classifier);
    c.multipliers.correction = m.value("correction", d.multipliers.correction);
  }
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.variant = j.contains("variant") ? model::parse_variant(j.at("variant").get<std::string>()) : d.variant;
  c.model = j.contains("model") ? j.at("model").get<model::ModelConfig>() : d.model;
  c.inference =
      j.contains("inference") ? model::parse_inference_path(j.at("inference").get<std::string>()) : d.inference;
  c.validate();
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) { throw model::ConfigError(field, msg); };
  if (!(base_lr > 0) || !std::isfinite(base_lr)) fail("base_lr", "must be positive and finite");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must lie in [0, 1)");
  if (total_steps < 1) fail("total_steps", "must be at least 1");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (!(schedule_a >= 0) || !(schedule_b >= 0)) fail("schedule_a/schedule_b", "must be non-negative");
  if (!(multipliers.backbone > 0)) fail("multipliers.backbone", "must be positive");
  if (!(multipliers.classifier > 0)) fail("multipliers.classifier", "must be positive");
  if (!(multipliers.correction > 0)) fail("multipliers.correction", "must be positive");
  weights.validate();
  kernel.validate();
  model.validate();
  if (weights.num_correction_layers != model.correction_layers) {
    fail("weights.num_correction_layers", "must equal model.correction_layers");
  }
}

// Schedule and optimiser -----------------------------------------------------

double GroupRates::of(ParamGroup g) const {
  switch (g) {
    case ParamGroup::backbone: return backbone;
    case ParamGroup::classifier: return classifier;
    case ParamGroup::correction: return correction;
  }
  throw std::invalid_argument("unknown parameter group");
}

GroupRates lr_at(double progress, const TrainConfig& config) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    throw std::invalid_argument("progress must lie in [0, 1], got " + std::to_string(progress));
  }
  const double eta = config.base_lr * std::pow(1.0 + config.schedule_a * progress, -config.schedule_b);
  return {eta * config.multipliers.backbone, eta * config.multipliers.classifier, eta * config.multipliers.correction};
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const nn::ParamRefs<T>& params) {
  OptimizerState s;
  s.buffers.reserve(params.size());
  for (const auto* p : params) s.buffers.emplace_back(p->value.shape());
  return s;
}

template <typename T>
void sgd_step(const nn::ParamRefs<T>& params, OptimizerState<T>& state, const GroupRates& rates, double momentum) {
  if (state.buffers.size() != params.size()) {
    throw ShapeError("optimizer holds " + std::to_string(state.buffers.size()) + " buffers for " +
                     std::to_string(params.size()) + " parameters");
  }
  const T m = static_cast<T>(momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    Tensor<T>& buf = state.buffers[i];
    if (buf.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw ShapeError("parameter '" + p.name + "' " + shape_string(p.value.shape()) + " does not match its buffer " +
                       shape_string(buf.shape()) + " or gradient " + shape_string(p.grad.shape()));
    }
    const T rate = static_cast<T>(rates.of(p.group));
    T* v = p.value.raw();
    T* b = buf.raw();
    const T* g = p.grad.raw();
    for (std::size_t k = 0, n = p.value.numel(); k < n; ++k) {
      b[k] = m * b[k] + g[k];
      v[k] -= rate * b[k];
    }
  }
}

template <typename T>
double evaluate(model::DcanModel<T>& model, const data::Dataset& split, Domain domain, std::size_t batch_size,
                model::InferencePath path) {
  split.require_labels("evaluate");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(start + batch_size, split.size()); ++i) rows.push_back(i);
    Tensor<float> images = split.gather_images(rows);
    std::vector<std::size_t> pred;
    if constexpr (std::is_same_v<T, float>) {
      pred = model.predict(images, domain, path);
    } else {
      pred = model.predict(images.template cast<T>(), domain, path);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) correct += pred[i] == split.labels[rows[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

// Training loop --------------------------------------------------------------

TrainState::TrainState(const TrainConfig& config)
    : model(config.model, config.variant, config.seed), optimizer(OptimizerState<float>::zeros_like(model.parameters())) {}

NonFiniteLoss::NonFiniteLoss(std::size_t step, const model::LossBreakdown& losses)
    : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + describe(losses)), step_(step) {}

std::uint64_t step_seed(std::uint64_t seed, std::size_t step) {
  return data::mix_seed(data::mix_seed(seed, 0x5a3b5e7ULL), step);
}

TrainResult train(TrainState& state, const TrainConfig& config, const data::DomainPair& pair,
                  const TrainOptions& options) {
  config.validate();
  pair.source_train.require_labels("source training split");
  pair.source_test.require_labels("source test split");
  pair.target_test.require_labels("target test split");
  const std::size_t stop = std::min(options.stop_at.value_or(config.total_steps), config.total_steps);
  const data::BatchIterator source_iter(pair.source_train.size(), config.batch_size, data::mix_seed(config.seed, 1));
  const data::BatchIterator target_iter(pair.target_train.size(), config.batch_size, data::mix_seed(config.seed, 2));
  auto params = state.model.parameters();
  if (params.size() != state.optimizer.buffers.size()) {
    throw std::logic_error("optimizer state does not belong to this model");
  }
  const auto start_time = std::chrono::steady_clock::now();
  TrainResult result;
  while (state.step < stop) {
    const std::size_t step = state.step;
    const GroupRates rates =
        lr_at(static_cast<double>(step) / static_cast<double>(config.total_steps), config);
    const auto src_rows = source_iter.batch(step);
    const auto tgt_rows = target_iter.batch(step);
    const Tensor<float> xs = pair.source_train.gather_images(src_rows);
    const std::vector<data::Label> ys = pair.source_train.gather_labels(src_rows);
    const Tensor<float> xt = pair.target_train.gather_images(tgt_rows);

    Rng rng(step_seed(config.seed, step));
    Tape<float> tape;
    state.model.zero_grad();
    auto losses = model::step_losses(state.model, tape, xs, ys, xt, config.weights, config.kernel, rng);
    if (!finite(losses.values) || !std::isfinite(losses.total.item())) throw NonFiniteLoss(step, losses.values);
    tape.backward(losses.total);
    sgd_step(params, state.optimizer, rates, config.momentum);
    state.step = step + 1;
    result.history.push_back(losses.values);

    const bool due = state.step == config.total_steps ||
                     (config.eval_interval > 0 && state.step % config.eval_interval == 0);
    if (due) {
      MetricsRow row;
      row.step = state.step;
      row.losses = losses.values;
      row.src_acc = evaluate(state.model, pair.source_test, Domain::source, config.batch_size, config.inference);
      row.tgt_acc = evaluate(state.model, pair.target_test, Domain::target, config.batch_size, config.inference);
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
      if (options.on_metrics) options.on_metrics(row);
      result.metrics.push_back(row);
    }
  }
  return result;
}

// Metrics files --------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& row) {
  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  const auto& l = row.losses;
  auto layer = [&](std::size_t i) { return i < l.per_layer.size() ? l.per_layer[i] : loss::LayerTerms<double>{0, 0}; };
  std::string out = std::to_string(row.step);
  for (double v : {l.source_ce, layer(0).alignment, layer(0).regularization, layer(1).alignment,
                   layer(1).regularization, l.entropy, l.total, row.src_acc, row.tgt_acc}) {
    out += "," + fmt(v);
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << kMetricsHeader << "\n";
  for (const auto& r : rows) f << format_metrics_row(r) << "\n";
}

json summary_json(const TrainConfig& config, const TrainState& state, const TrainResult& result) {
  json j{{"config", config}, {"steps_completed", state.step}};
  if (!result.metrics.empty()) {
    const auto& last = result.metrics.back();
    j["final"] = {{"step", last.step}, {"src_acc", last.src_acc}, {"tgt_acc", last.tgt_acc},
                  {"total_loss", last.losses.total}};
  }
  return j;
}

// Checkpoints ----------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'D', 'C', 'K', 'P'};

struct Writer {
  std::vector<std::uint8_t> bytes;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void array(const std::string& name, const Tensor<float>& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.numel()));
    for (float f : t.data()) {
      std::uint32_t b;
      std::memcpy(&b, &f, 4);
      u32(b);
    }
  }
};

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t at = 0;
  void need(std::size_t n, const char* what) {
    if (bytes.size() - at < n) throw CheckpointError("", std::string("checkpoint truncated while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return s;
  }
};

// Every stored array with a stable name, in a fixed order.
std::vector<std::pair<std::string, Tensor<float>*>> named_arrays(TrainState& state) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  auto params = state.model.parameters();
  for (auto* p : params) out.emplace_back("param/" + p->name, &p->value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.emplace_back("momentum/" + params[i]->name, &state.optimizer.buffers.at(i));
  }
  for (auto* n : state.model.norms()) {
    out.emplace_back("norm/" + n->name + ".mean", &n->mean);
    out.emplace_back("norm/" + n->name + ".var", &n->var);
    out.emplace_back("norm/" + n->name + ".scale", &n->scale);
    out.emplace_back("norm/" + n->name + ".shift", &n->shift);
  }
  return out;
}

// First differing key between two JSON objects, as a dotted path.
std::optional<std::string> first_difference(const json& a, const json& b, const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!b.contains(key)) return path;
      if (auto d = first_difference(value, b.at(key), path)) return d;
    }
    for (const auto& [key, _] : b.items()) {
      if (!a.contains(key)) return prefix.empty() ? key : prefix + "." + key;
    }
    return std::nullopt;
  }
  if (a != b) return prefix;
  return std::nullopt;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(TrainState& state, const TrainConfig& config) {
  Writer w;
  w.bytes.assign(kCkptMagic, kCkptMagic + 4);
  w.u32(kCheckpointVersion);
  w.str(json(config).dump());
  w.u64(state.step);
  const auto arrays = named_arrays(state);
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) w.array(name, *t);
  return w.bytes;
}

void save_checkpoint(const std::filesystem::path& path, TrainState& state, const TrainConfig& config) {
  const auto bytes = encode_checkpoint(state, config);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to " + path.string() + " failed");
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainConfig* expected) {
  if (bytes.size() < 4 || !std::equal(kCkptMagic, kCkptMagic + 4, bytes.begin())) {
    throw CheckpointError("magic", "not a checkpoint (expected \"DCKP\")");
  }
  Reader r{bytes, 4};
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("version", "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                         std::to_string(kCheckpointVersion) + ")");
  }
  json stored_json;
  try {
    stored_json = json::parse(r.str("config"));
  } catch (const json::exception& e) {
    throw CheckpointError("config", std::string("config echo is not valid JSON: ") + e.what());
  }
  if (expected) {
    const json want = json(*expected);
    for (const char* key : {"model", "variant"}) {
      if (!stored_json.contains(key)) throw CheckpointError(key, "missing from checkpoint");
      if (auto d = first_difference(stored_json.at(key), want.at(key), key)) {
        throw CheckpointError(*d, "checkpoint was written for a different configuration (stored " +
                                      stored_json.at(key).dump() + ", expected " + want.at(key).dump() + ")");
      }
    }
  }
  Checkpoint ck{stored_json.get<TrainConfig>(), TrainState(stored_json.get<TrainConfig>())};
  if (expected) ck.config = *expected;
  ck.state.step = r.u64("step");
  const auto arrays = named_arrays(ck.state);
  const std::uint32_t count = r.u32("array count");
  if (count != arrays.size()) {
    throw CheckpointError("arrays", "checkpoint stores " + std::to_string(count) + " arrays, model needs " +
                                        std::to_string(arrays.size()));
  }
  for (const auto& [name, t] : arrays) {
    const std::string stored = r.str("array name");
    if (stored != name) throw CheckpointError(name, "found array '" + stored + "' in its place");
    const std::uint32_t n = r.u32("array length");
    if (n != t->numel()) {
      throw CheckpointError(name, "stored " + std::to_string(n) + " values, model needs " + std::to_string(t->numel()));
    }
    r.need(std::size_t{n} * 4, "array payload");
    float* dst = t->raw();
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t b = r.u32("array payload");
      std::memcpy(dst + i, &b, 4);
    }
  }
  if (r.at != bytes.size()) throw CheckpointError("", "trailing bytes after the last array");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, expected);
}

#define DCAN_INSTANTIATE_TRAIN(T)                                                                           \
  template struct OptimizerState<T>;                                                                        \
  template void sgd_step(const nn::ParamRefs<T>&, OptimizerState<T>&, const GroupRates&, double);           \
  template double evaluate(model::DcanModel<T>&, const data::Dataset&, Domain, std::size_t, model::InferencePath);

DCAN_INSTANTIATE_TRAIN(float)
DCAN_INSTANTIATE_TRAIN(double)

}  // namespace dcan::train

namespace dcan::model {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"in_channels", c.in_channels},         {"height", c.height},
           {"width", c.width},                     {"stage_widths", c.stage_widths},
           {"blocks_per_stage", c.blocks_per_stage}, {"attention_ratio", c.attention_ratio},
           {"num_classes", c.num_classes},         {"correction_layers", c.correction_layers},
           {"stem_stride", c.stem_stride}};
}

void from_json(const json& j, ModelConfig& c) {
  train::reject_unknown(j,
                 {"in_channels", "height", "width", "stage_widths", "blocks_per_stage", "attention_ratio",
                  "num_classes", "correction_layers", "stem_stride"},
                 "model");
  ModelConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.stage_widths = j.value("stage_widths", d.stage_widths);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.attention_ratio = j.value("attention_ratio", d.attention_ratio);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.correction_layers = j.value("correction_layers", d.correction_layers);
  c.stem_stride = j.value("stem_stride", d.stem_stride);
}

}  // namespace dcan::model
