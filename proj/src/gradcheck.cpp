// SPDX-License-Identifier: Apache-2.0

#include "dcan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>

#include "dcan/losses.hpp"
#include "dcan/model.hpp"
#include "dcan/nn.hpp"
#include "dcan/ops.hpp"

namespace dcan::gradcheck {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
Result compare(std::string name, double tolerance, double step, std::vector<Probe<T>>& probes,
               const std::function<Evaluation()>& evaluate, std::size_t per_probe, double floor) {
  Result r;
  r.name = std::move(name);
  r.tolerance = tolerance;
  const Evaluation at = evaluate();
  const std::uint64_t base = at.signature;
  const double abs_floor = floor * std::max(1.0, std::abs(at.value));
  for (auto& probe : probes) {
    const std::size_t n = probe.values.size();
    if (n == 0) continue;
    const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, per_probe));
    for (std::size_t i = 0; i < n; i += stride) {
      const T original = probe.values[i];
      // Fourth-order central stencil: truncation error O(h^4), so a larger
      // step keeps rounding noise small.
      double f[4];
      bool crossed = false;
      const double offsets[4] = {-2.0, -1.0, 1.0, 2.0};
      for (int k = 0; k < 4; ++k) {
        probe.values[i] = static_cast<T>(static_cast<double>(original) + offsets[k] * step);
        const Evaluation e = evaluate();
        f[k] = e.value;
        crossed = crossed || e.signature != base;
      }
      probe.values[i] = original;
      if (crossed) {
        ++r.skipped;
        continue;
      }
      const double numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * step);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(probe.analytic[i], numeric, abs_floor));
      ++r.checked;
    }
  }
  return r;
}

namespace {

template <typename T>
using GraphFn = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>, loss::BandwidthPin*)>;

template <typename T>
struct Suite {
  Rng rng;
  bool f64 = std::is_same_v<T, double>;
  double smooth_tol = f64 ? 1e-6 : 2e-2;
  double composite_tol = f64 ? 1e-4 : 2e-2;
  double step = f64 ? 1e-3 : 1e-2;
  double floor = f64 ? 1e-6 : 1e-2;
  std::vector<Result> results;

  explicit Suite(std::uint64_t seed) : rng(seed) {}

  Tensor<T> normal(Shape shape, double sd = 1.0) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> d(0.0, sd);
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
  }
  Tensor<T> uniform(Shape shape, double lo, double hi) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
  }
  // Differentiates `fn` with respect to its inputs and to `params`. Outputs
  // with more than one element are contracted against fixed random weights.
  void check(std::string name, double tol, std::vector<Tensor<T>> inputs, nn::ParamRefs<T> params,
             const GraphFn<T>& fn, std::size_t per_probe = 24) {
    loss::BandwidthPin pin;
    std::optional<Tensor<T>> weights;
    auto run = [&](bool with_grad, std::vector<Probe<T>>* probes) -> Evaluation {
      Tape<T> tape;
      tape.set_track_branches(true);
      std::vector<Var<T>> vars;
      for (const auto& x : inputs) vars.push_back(tape.variable(x));
      Var<T> out = fn(tape, vars, &pin);
      if (out.value().numel() != 1) {
        if (!weights) weights = normal(out.shape());
        out = sum(mul(out, tape.constant(*weights)));
      }
      Evaluation e{static_cast<double>(out.item()), tape.branch_signature()};
      if (with_grad) {
        for (auto* p : params) p->zero_grad();
        tape.backward(out);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          const Tensor<T> g = tape.grad(vars[i]);
          probes->push_back({inputs[i].data(), std::vector<double>(g.data().begin(), g.data().end())});
        }
        for (auto* p : params) {
          probes->push_back({p->value.data(), std::vector<double>(p->grad.data().begin(), p->grad.data().end())});
        }
      }
      return e;
    };
    std::vector<Probe<T>> probes;
    run(true, &probes);
    pin.replay();
    auto evaluate = [&] {
      pin.replay();
      return run(false, nullptr);
    };
    results.push_back(compare<T>(std::move(name), tol, step, probes, evaluate, per_probe, floor));
  }

  void primitives() {
    const double s = smooth_tol;
    auto two = [](auto op) {
      return GraphFn<T>([op](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin*) { return op(v[0], v[1]); });
    };
    auto one = [](auto op) {
      return GraphFn<T>([op](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin*) { return op(v[0]); });
    };
    check("add (broadcast)", s, {normal({3, 4}), normal({4})}, {}, two([](auto& a, auto& b) { return add(a, b); }));
    check("sub", s, {normal({3, 4}), normal({3, 4})}, {}, two([](auto& a, auto& b) { return sub(a, b); }));
    check("mul (broadcast)", s, {normal({2, 3, 4}), normal({3, 1})}, {},
          two([](auto& a, auto& b) { return mul(a, b); }));
    check("div", s, {normal({3, 4}), uniform({3, 4}, 0.5, 2.0)}, {}, two([](auto& a, auto& b) { return div(a, b); }));
    check("relu", s, {normal({4, 5})}, {}, one([](auto& a) { return relu(a); }));
    check("sigmoid", s, {normal({4, 5})}, {}, one([](auto& a) { return sigmoid(a); }));
    check("log", s, {uniform({4, 5}, 0.2, 2.0)}, {}, one([](auto& a) { return log(a); }));
    check("exp", s, {normal({4, 5}, 0.5)}, {}, one([](auto& a) { return exp(a); }));
    check("scale", s, {normal({4, 5})}, {}, one([](auto& a) { return scale(a, static_cast<T>(-2.5)); }));
    check("clamp_min", s, {normal({4, 5})}, {}, one([](auto& a) { return clamp_min(a, static_cast<T>(0.1)); }));
    check("matmul", s, {normal({3, 4}), normal({4, 5})}, {}, two([](auto& a, auto& b) { return matmul(a, b); }));
    check("transpose", s, {normal({3, 4})}, {}, one([](auto& a) { return transpose(a); }));
    check("conv2d", s, {normal({2, 3, 5, 5}), normal({4, 3, 3, 3}, 0.3)}, {},
          two([](auto& a, auto& b) { return conv2d(a, b, 2, 1); }));
    check("global_avg_pool", s, {normal({2, 3, 4, 4})}, {}, one([](auto& a) { return global_avg_pool(a); }));
    check("softmax", s, {normal({3, 5})}, {}, one([](auto& a) { return softmax(a); }));
    check("sum", s, {normal({3, 4})}, {}, one([](auto& a) { return sum(a); }));
    check("mean", s, {normal({3, 4})}, {}, one([](auto& a) { return mean(a); }));
    check("row_sum", s, {normal({3, 4})}, {}, one([](auto& a) { return row_sum(a); }));
    check("reshape", s, {normal({3, 4})}, {}, one([](auto& a) { return reshape(a, Shape{2, 6}); }));
    const std::vector<std::size_t> rows{2, 0, 2, 1};
    check("gather_rows", s, {normal({3, 4})}, {}, GraphFn<T>([rows](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin*) {
            return gather_rows(v[0], std::span<const std::size_t>(rows));
          }));
    check("pairwise_sq_dist", s, {normal({3, 4}), normal({5, 4})}, {},
          two([](auto& a, auto& b) { return pairwise_sq_dist(a, b); }));
  }

  void blocks() {
    const double c = composite_tol;
    {
      auto layer = std::make_shared<nn::Linear<T>>("lin", 6, 4, ParamGroup::backbone, rng);
      nn::ParamRefs<T> ps;
      layer->collect(ps);
      for (auto& v : layer->bias().value.data()) v = static_cast<T>(0.1);
      check("linear", c, {normal({3, 6})}, ps, [layer](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
        return layer->forward(t, v[0]);
      });
    }
    {
      auto norm = std::make_shared<nn::FrozenNorm<T>>("norm", 3);
      norm->mean = uniform({3}, -0.5, 0.5);
      norm->var = uniform({3}, 0.5, 2.0);
      norm->scale = uniform({3}, 0.5, 1.5);
      norm->shift = uniform({3}, -0.2, 0.2);
      check("frozen_norm", c, {normal({2, 3, 3, 3})}, {}, [norm](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
        return norm->forward(t, v[0]);
      });
    }
    for (Domain d : {Domain::source, Domain::target}) {
      auto att = std::make_shared<nn::DomainConditionedAttention<T>>("att", 8, 2, false, rng);
      for (auto& v : att->reduce(Domain::target).value.data()) v = static_cast<T>(v * 1.3);
      nn::ParamRefs<T> ps;
      att->collect(ps);
      check(std::string("attention (") + std::string(to_string(d)) + " route)", c, {normal({2, 8, 3, 3})}, ps,
            [att, d](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
              auto out = att->forward(t, v[0], d);
              return add(sum(out.features), sum(mul(out.scales, out.scales)));
            });
    }
    {
      auto block = std::make_shared<nn::ResidualBlock<T>>("block", 4, 8, 2, 2, false, rng);
      nn::ParamRefs<T> ps;
      block->collect(ps);
      check("residual_block", c, {normal({2, 4, 6, 6})}, ps,
            [block](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
              return block->forward(t, v[0], Domain::target).features;
            });
    }
    {
      auto corr = std::make_shared<nn::FeatureCorrectionBlock<T>>("corr", 6, rng);
      randomise(*corr);
      nn::ParamRefs<T> ps;
      corr->collect(ps);
      check("correction_block", c, {normal({4, 6})}, ps, [corr](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
        return corr->forward(t, v[0]).corrected;
      });
    }
    {
      auto corr = std::make_shared<nn::FeatureCorrectionBlock<T>>("corr", 5, rng);
      randomise(*corr, 0.2);
      nn::ParamRefs<T> ps;
      corr->collect(ps);
      check("softmax_correction", c, {normal({3, 5})}, ps,
            [corr](Tape<T>& t, std::span<const Var<T>> v, loss::BandwidthPin*) {
              return corr->correct_probabilities(t, softmax(v[0]));
            });
    }
  }

  void randomise(nn::FeatureCorrectionBlock<T>& block, double sd = 0.5) {
    for (auto* p : {&block.fc2().weight(), &block.fc2().bias()}) {
      std::normal_distribution<double> d(0.0, sd);
      for (auto& v : p->value.data()) v = static_cast<T>(d(rng));
    }
  }

  void losses() {
    const double c = composite_tol;
    const loss::KernelConfig kernel;
    check("mmd", c, {normal({6, 4}), normal({5, 4}, 1.5)}, {},
          [kernel](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin* pin) { return loss::mmd(v[0], v[1], kernel, pin); });
    const std::vector<loss::Label> labels{0, 1, 0, 1, 1, 0, 0, 1};
    loss::SubsetSample subset;
    subset.indices = {1, 2, 5, 6};
    check("source_regularization", c, {normal({8, 4}), normal({8, 4})}, {},
          [kernel, labels, subset](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin* pin) {
            return loss::source_regularization_loss(v[0], v[1], labels, subset, 2, kernel, pin);
          });
    const std::vector<loss::Label> ce_labels{2, 0, 4, 1};
    check("cross_entropy (through softmax)", c, {normal({4, 5})}, {},
          [ce_labels](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin*) {
            return loss::cross_entropy(softmax(v[0]), ce_labels);
          });
    check("target_entropy (through softmax)", c, {normal({4, 5})}, {},
          [](Tape<T>&, std::span<const Var<T>> v, loss::BandwidthPin*) { return loss::target_entropy(softmax(v[0])); });
  }

  void full_objective() {
    model::ModelConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.stage_widths = {4, 8};
    cfg.blocks_per_stage = 1;
    cfg.num_classes = 2;
    auto net = std::make_shared<model::DcanModel<T>>(cfg, model::Variant::full, rng());
    randomise(*net->pooled_correction(), 0.3);
    randomise(*net->softmax_correction(), 0.05);
    for (auto& b : net->blocks()) {
      for (auto& v : b.attention().reduce(Domain::target).value.data()) v = static_cast<T>(v * 1.2);
    }
    auto xs = std::make_shared<Tensor<T>>(uniform({8, 3, 8, 8}, 0.0, 1.0));
    auto xt = std::make_shared<Tensor<T>>(uniform({8, 3, 8, 8}, 0.0, 1.0));
    const std::vector<loss::Label> ys{0, 1, 0, 1, 1, 0, 0, 1};
    const std::uint64_t subset_seed = rng();
    check(
        "full objective (2 classes, 8 samples)", composite_tol, {}, net->parameters(),
        [net, xs, xt, ys, subset_seed](Tape<T>& t, std::span<const Var<T>>, loss::BandwidthPin* pin) {
          Rng sub(subset_seed);
          return model::step_losses(*net, t, *xs, ys, *xt, loss::LossWeights{}, loss::KernelConfig{}, sub, pin).total;
        },
        8);
  }
};

}  // namespace

template <typename T>
std::vector<Result> run_suite(std::uint64_t seed) {
  Suite<T> suite(seed);
  suite.primitives();
  suite.blocks();
  suite.losses();
  suite.full_objective();
  return std::move(suite.results);
}

template Result compare<float>(std::string, double, double, std::vector<Probe<float>>&,
                               const std::function<Evaluation()>&, std::size_t, double);
template Result compare<double>(std::string, double, double, std::vector<Probe<double>>&,
                                const std::function<Evaluation()>&, std::size_t, double);
template std::vector<Result> run_suite<float>(std::uint64_t);
template std::vector<Result> run_suite<double>(std::uint64_t);

}  // namespace dcan::gradcheck
