// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "dcan/losses.hpp"
#include "support.hpp"

using namespace dcan;
using namespace dcan::loss;
using dcan::testing::fd_max_rel_error;
using dcan::testing::mmd_median_oracle;
using dcan::testing::random_normal;
using dcan::testing::select_rows;

namespace {

using Vars = std::span<const Var<double>>;

const std::vector<double> kMultipliers{0.25, 0.5, 1.0, 2.0, 4.0};

double mmd_value(const Tensor<double>& a, const Tensor<double>& b, const KernelConfig& k = {}) {
  Tape<double> tape(false);
  return mmd(tape.constant(a), tape.constant(b), k).item();
}

Tensor<double> random_simplex(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  Tape<double> tape(false);
  return softmax(tape.constant(random_normal({n, k}, rng, 2.0))).value();
}

}  // namespace

TEST_SUITE("alignment_losses") {

TEST_CASE("kernel and weight configs validate their ranges") {
  KernelConfig k;
  CHECK_NOTHROW(k.validate());
  k.multipliers.clear();
  CHECK_THROWS_AS(k.validate(), std::invalid_argument);
  k.multipliers = {1.0, -2.0};
  CHECK_THROWS_AS(k.validate(), std::invalid_argument);
  LossWeights w;
  CHECK(w.alpha == 1.5);
  CHECK(w.beta == 0.1);
  CHECK(w.p_subset == 0.8);
  CHECK_NOTHROW(w.validate());
  w.p_subset = 0.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w.p_subset = 0.5;
  w.alpha = -1.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("median of pairwise squared distances matches a sorted-list oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t na = 1 + trial % 6, nb = 1 + (trial * 7) % 5;
    const auto a = random_normal({na, 3}, rng), b = random_normal({nb, 3}, rng);
    CHECK(median_pairwise_sq_dist(a, b) == doctest::Approx(dcan::testing::median_oracle(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("vectorised MMD equals the double-loop oracle for every n up to 16") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> n(1, 16), d(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = d(rng);
    const auto a = random_normal({n(rng), dim}, rng);
    const auto b = random_normal({n(rng), dim}, rng, 1.5);
    CHECK(std::abs(mmd_value(a, b) - mmd_median_oracle(a, b, kMultipliers)) < 1e-12);
  }
  const auto a = random_normal({5, 3}, rng), b = random_normal({7, 3}, rng);
  CHECK(std::abs(mmd_value(a, b) - mmd_median_oracle(a, b, kMultipliers)) < 1e-12);
}

TEST_CASE("MMD is symmetric, vanishes on identical samples and is non-negative") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_normal({1 + std::size_t(trial % 9), 4}, rng);
    const auto b = random_normal({1 + std::size_t(trial % 5), 4}, rng);
    CHECK(std::abs(mmd_value(a, b) - mmd_value(b, a)) < 1e-12);
    CHECK(mmd_value(a, a) <= 1e-9);
    CHECK(mmd_value(a, b) >= -1e-9);
  }
}

TEST_CASE("single gaussian between two singletons has the closed form 2 - 2 exp(-d^2 / 2 s^2)") {
  KernelConfig k;
  k.bandwidth = KernelConfig::Bandwidth::fixed;
  k.multipliers = {1.0};
  k.fixed_base = 0.7;
  for (double d : {0.0, 0.3, 1.0, 2.5}) {
    const double got = mmd_value(Tensor<double>({1, 1}, 0.0), Tensor<double>({1, 1}, d), k);
    CHECK(got == doctest::Approx(2.0 - 2.0 * std::exp(-d * d / (2.0 * 0.7))).epsilon(1e-14));
  }
  CHECK(mmd_value(Tensor<double>({1, 1}, 0.0), Tensor<double>({1, 1}, 0.0), k) == 0.0);
}

TEST_CASE("coincident pooled points use the bandwidth floor and stay finite") {
  const Tensor<double> a({3, 2}, 1.0), b({2, 2}, 1.0);
  CHECK(median_pairwise_sq_dist(a, b) == 0.0);
  CHECK(mmd_value(a, b) == 0.0);
  BandwidthPin pin;
  Tape<double> tape(false);
  mmd(tape.constant(a), tape.constant(b), KernelConfig{}, &pin);
  pin.replay();
  CHECK(pin.resolve(123.0) == kBandwidthFloor);
}

TEST_CASE("MMD rejects empty or mismatched inputs") {
  Tape<double> tape(false);
  CHECK_THROWS_AS(mmd(tape.constant(Tensor<double>({0, 3})), tape.constant(Tensor<double>({2, 3})), KernelConfig{}),
                  ShapeError);
  CHECK_THROWS_AS(mmd(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 4})), KernelConfig{}),
                  ShapeError);
}

TEST_CASE("correction alignment loss equals plain MMD and vanishes on equal inputs") {
  std::mt19937_64 rng(4);
  const auto hs = random_normal({6, 4}, rng), ht = random_normal({6, 4}, rng);
  Tape<double> tape(false);
  CHECK(correction_alignment_loss(tape.constant(hs), tape.constant(ht), KernelConfig{}).item() == mmd_value(hs, ht));
  CHECK(correction_alignment_loss(tape.constant(hs), tape.constant(hs), KernelConfig{}).item() <= 1e-9);
}

TEST_CASE("correction alignment gradient wrt the corrected target matches central differences (n=6, D=4)") {
  std::mt19937_64 rng(5);
  const auto hs = random_normal({6, 4}, rng);
  BandwidthPin pin;
  // The bandwidth is a constant of the gradient, so finite differences hold it fixed.
  auto f = [&](Tape<double>& t, Vars v) {
    if (pin.size() > 0) pin.replay();
    return correction_alignment_loss(t.constant(hs), v[0], KernelConfig{}, &pin);
  };
  CHECK(fd_max_rel_error({random_normal({6, 4}, rng)}, f) < 1e-4);
}

TEST_CASE("subset sampler: empty at p=0, binomial mean, determinism, unique indices") {
  std::vector<Label> labels(320);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = Label(i % 5);
  Rng zero(1);
  CHECK(sample_subset(labels, 0.0, 5, zero).realized_size() == 0);

  Rng rng(2026);
  double total = 0.0;
  for (int i = 0; i < 10000; ++i) total += double(sample_subset(labels, 0.8, 5, rng).realized_size());
  const double mean = total / 10000.0;
  CHECK(mean > 51.2 - 2.0);
  CHECK(mean < 51.2 + 2.0);

  Rng a(7), b(7);
  const auto sa = sample_subset(labels, 0.8, 5, a);
  CHECK(sa.indices == sample_subset(labels, 0.8, 5, b).indices);
  CHECK(std::set<std::size_t>(sa.indices.begin(), sa.indices.end()).size() == sa.indices.size());
  for (std::size_t idx : sa.indices) CHECK(idx < labels.size());

  const std::vector<Label> bad{0, 5};
  CHECK_THROWS_AS(sample_subset(bad, 0.8, 5, a), std::out_of_range);
}

TEST_CASE("source regulariser: empty subset gives zero") {
  std::mt19937_64 rng(6);
  const auto h = random_normal({8, 3}, rng);
  const std::vector<Label> labels{0, 1, 0, 1, 0, 1, 0, 1};
  Tape<double> tape(false);
  auto v = source_regularization_loss(tape.constant(h), tape.constant(h), labels, SubsetSample{}, 2, KernelConfig{});
  CHECK(v.item() == 0.0);
}

TEST_CASE("source regulariser: one class with R equal to that class and identity correction is zero") {
  std::mt19937_64 rng(7);
  const auto h = random_normal({5, 3}, rng);
  const std::vector<Label> labels(5, 2);
  SubsetSample all;
  all.indices = {0, 1, 2, 3, 4};
  Tape<double> tape(false);
  auto v = source_regularization_loss(tape.constant(h), tape.constant(h), labels, all, 3, KernelConfig{});
  CHECK(std::abs(v.item()) <= 1e-9);
}

TEST_CASE("source regulariser equals a sum of per-class double-loop MMDs (2 classes, n=8)") {
  std::mt19937_64 rng(8);
  const auto h = random_normal({8, 4}, rng);
  const auto hc = random_normal({8, 4}, rng);
  const std::vector<Label> labels{0, 1, 1, 0, 0, 1, 0, 0};
  Rng draw(8);
  SubsetSample r = sample_subset(labels, 0.8, 2, draw);
  if (r.realized_size() == 0) r.indices = {1, 4};
  double expected = 0.0;
  const auto rows_r = select_rows(hc, r.indices);
  for (Label k : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < 8; ++i)
      if (labels[i] == k) members.push_back(i);
    expected += mmd_median_oracle(select_rows(h, members), rows_r, kMultipliers);
  }
  Tape<double> tape(false);
  auto v = source_regularization_loss(tape.constant(h), tape.constant(hc), labels, r, 3, KernelConfig{});
  CHECK(std::abs(v.item() - expected) < 1e-12);  // class 2 is absent and contributes nothing
}

TEST_CASE("cross-entropy: one-hot is zero, uniform is ln 5, softmax gradient is probs - onehot") {
  Tape<double> tape(false);
  const Tensor<double> onehot({2, 3}, std::vector<double>{0, 1, 0, 1, 0, 0});
  const std::vector<Label> y{1, 0};
  CHECK(cross_entropy(tape.constant(onehot), y).item() == 0.0);
  const std::vector<Label> y5{0, 3, 4};
  CHECK(std::abs(cross_entropy(tape.constant(Tensor<double>({3, 5}, 0.2)), y5).item() - std::log(5.0)) < 1e-6);
  CHECK_THROWS(cross_entropy(tape.constant(Tensor<double>({1, 3}, 1.0 / 3)), std::vector<Label>{3}));

  std::mt19937_64 rng(9);
  const auto logits = random_normal({3, 5}, rng);
  Tape<double> t;
  auto z = t.variable(logits);
  auto p = softmax(z);
  t.backward(cross_entropy(p, y5));
  const auto g = t.grad(z);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      const double expect = (p.value().at(i, k) - (k == y5[i] ? 1.0 : 0.0)) / 3.0;
      CHECK(g.at(i, k) == doctest::Approx(expect).epsilon(1e-12));
    }
  CHECK(fd_max_rel_error({logits}, [&](Tape<double>&, Vars v) { return cross_entropy(softmax(v[0]), y5); }) < 1e-6);
}

TEST_CASE("target entropy: one-hot zero, uniform ln 5, straight-line sum, range [0, ln K]") {
  Tape<double> tape(false);
  CHECK(target_entropy(tape.constant(Tensor<double>({2, 3}, std::vector<double>{0, 1, 0, 1, 0, 0}))).item() == 0.0);
  CHECK(std::abs(target_entropy(tape.constant(Tensor<double>({4, 5}, 0.2))).item() - std::log(5.0)) < 1e-12);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_simplex(6, 5, rng);
    double s = 0.0;
    for (double v : p.data()) s -= v * std::log(v);
    s /= 6.0;
    const double got = target_entropy(tape.constant(p)).item();
    CHECK(std::abs(got - s) < 1e-12);
    CHECK(got >= 0.0);
    CHECK(got <= std::log(5.0) + 1e-12);
  }
  CHECK(fd_max_rel_error({random_normal({4, 5}, rng)}, [](Tape<double>&, Vars v) { return target_entropy(softmax(v[0])); }) <
        1e-6);
}

TEST_CASE("total objective: anchors 7.1 and 4.1, alpha = beta = 0, length mismatch") {
  const LossWeights w;
  const std::vector<LayerTerms<double>> ones{{1.0, 1.0}, {1.0, 1.0}};
  CHECK(total_objective<double>(1.0, ones, 1.0, w, TermMask::all(2)) == 7.1);
  TermMask no_reg = TermMask::all(2);
  no_reg.regularization = {false, false};
  CHECK(total_objective<double>(1.0, ones, 1.0, w, no_reg) == 4.1);
  LossWeights zero = w;
  zero.alpha = 0.0;
  zero.beta = 0.0;
  CHECK(total_objective<double>(2.5, std::vector<LayerTerms<double>>{{3.0, 4.0}, {5.0, 6.0}}, 7.0, zero,
                                TermMask::all(2)) == 2.5);
  CHECK(total_objective<double>(2.5, ones, 9.0, w, TermMask::none(2)) == 2.5);
  const std::vector<LayerTerms<double>> one_layer{{1.0, 1.0}};
  CHECK_THROWS_AS(total_objective<double>(1.0, one_layer, 1.0, w, TermMask::all(2)), std::invalid_argument);
}

TEST_CASE("total objective is linear with the stated coefficients (unit-vector probes)") {
  const LossWeights w;
  const std::vector<double> coeff{1.0, w.alpha, w.alpha, w.alpha, w.alpha, w.beta};
  auto eval = [&](const std::vector<double>& x) {
    const std::vector<LayerTerms<double>> layers{{x[1], x[2]}, {x[3], x[4]}};
    return total_objective<double>(x[0], layers, x[5], w, TermMask::all(2));
  };
  const double at_zero = eval(std::vector<double>(6, 0.0));
  CHECK(at_zero == 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> e(6, 0.0);
    e[i] = 1.0;
    CHECK(std::abs(eval(e) - coeff[i]) <= 1e-12);
  }
  std::mt19937_64 rng(11);
  std::normal_distribution<double> d;
  std::vector<double> x(6);
  for (auto& v : x) v = d(rng);
  CHECK(std::abs(eval(x) - std::inner_product(x.begin(), x.end(), coeff.begin(), 0.0)) <= 1e-12);
}

TEST_CASE("total objective on tape variables matches the double version") {
  Tape<double> tape(false);
  auto c = [&](double v) { return tape.constant(Tensor<double>::scalar(v)); };
  const std::vector<LayerTerms<Var<double>>> layers{{c(0.3), c(0.4)}, {c(0.5), c(0.6)}};
  const std::vector<LayerTerms<double>> plain{{0.3, 0.4}, {0.5, 0.6}};
  const LossWeights w;
  const auto mask = TermMask::all(2);
  CHECK(total_objective<Var<double>>(c(1.2), layers, c(0.7), w, mask).item() ==
        doctest::Approx(total_objective<double>(1.2, plain, 0.7, w, mask)).epsilon(1e-15));
}

}  // TEST_SUITE
