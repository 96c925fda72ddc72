// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "dcan/autodiff.hpp"
#include "dcan/ops.hpp"
#include "dcan/tensor.hpp"
#include "support.hpp"

using namespace dcan;
using dcan::testing::contracted;
using dcan::testing::fd_max_rel_error;
using dcan::testing::random_normal;
using dcan::testing::random_uniform;

namespace {

using Vars = std::span<const Var<double>>;

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

// Straight-line cross-correlation.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> y({n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = long(i * stride + u) - long(pad), q = long(j * stride + v) - long(pad);
                if (r < 0 || q < 0 || r >= long(h) || q >= long(w)) continue;
                s += x.at(b, c, r, q) * k.at(o, c, u, v);
              }
          y.at(b, o, i, j) = s;
        }
  return y;
}

// Materialises a trailing-aligned broadcast of `a` into `out_shape`.
double broadcast_at(const Tensor<double>& a, const Shape& out_shape, std::size_t flat) {
  std::vector<std::size_t> idx(out_shape.size());
  for (std::size_t d = out_shape.size(); d-- > 0;) {
    idx[d] = flat % out_shape[d];
    flat /= out_shape[d];
  }
  const std::size_t off = out_shape.size() - a.rank();
  std::size_t pos = 0;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    const std::size_t i = a.shape()[d] == 1 ? 0 : idx[off + d];
    pos = pos * a.shape()[d] + i;
  }
  return a[pos];
}

}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("tensor basics: scalar, indexing, reshape, cast") {
  auto s = Tensor<double>::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s.item() == 4.0);
  Tensor<double> m({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  CHECK(m.at(1, 2) == 5.0);
  CHECK(m.reshaped({3, 2}).at(2, 0) == 4.0);
  CHECK_THROWS_AS(m.reshaped({4, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK(m.cast<float>().cast<double>() == m);
  CHECK(parse_dtype("f64") == DType::f64);
  CHECK(to_string(DType::f32) == "f32");
}

TEST_CASE("sigmoid and relu on hand-picked inputs") {
  Tape<double> tape;
  auto z = sigmoid(tape.constant(Tensor<double>({3}, 0.0)));
  for (double v : z.value().data()) CHECK(v == 0.5);
  auto r = relu(tape.constant(Tensor<double>({3}, std::vector<double>{-1, 0, 2})));
  CHECK(r.value() == Tensor<double>({3}, std::vector<double>{0, 0, 2}));
}

TEST_CASE("sigmoid derivative at 1 matches central difference to 1e-6") {
  const double err = fd_max_rel_error({Tensor<double>({1}, 1.0)},
                                      [](Tape<double>&, Vars v) { return sum(sigmoid(v[0])); });
  CHECK(err < 1e-6);
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1}, 1.0));
  tape.backward(sum(sigmoid(x)));
  const double s = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(tape.grad(x)[0] == doctest::Approx(s * (1 - s)).epsilon(1e-14));
}

TEST_CASE("relu gradient at exactly zero is zero") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}, std::vector<double>{-1, 0, 2}));
  tape.backward(sum(relu(x)));
  CHECK(tape.grad(x) == Tensor<double>({3}, std::vector<double>{0, 0, 1}));
}

TEST_CASE("log floors its argument so zero stays finite") {
  Tape<double> tape;
  auto y = log(tape.constant(Tensor<double>({2}, std::vector<double>{0.0, 1.0})));
  CHECK(y.value()[0] == doctest::Approx(std::log(1e-12)));
  CHECK(y.value()[1] == 0.0);
}

TEST_CASE("matmul: identity, hand arithmetic, gradient, inner mismatch") {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  auto m = tape.constant(random_normal({3, 3}, rng));
  auto eye = tape.constant(t2(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  CHECK(matmul(eye, m).value() == m.value());
  auto y = matmul(tape.constant(t2(2, 2, {1, 2, 3, 4})), tape.constant(t2(2, 1, {5, 6})));
  CHECK(y.value() == t2(2, 1, {17, 39}));

  const auto w = random_normal({4, 3}, rng);
  const double err = fd_max_rel_error({random_normal({4, 5}, rng), random_normal({5, 3}, rng)},
                                      contracted([](Tape<double>&, Vars v) { return matmul(v[0], v[1]); }, w));
  CHECK(err < 1e-6);
  CHECK_THROWS_AS(matmul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2, 3}))), ShapeError);
}

TEST_CASE("transpose swaps axes") {
  Tape<double> tape;
  auto y = transpose(tape.constant(t2(2, 3, {1, 2, 3, 4, 5, 6})));
  CHECK(y.value() == t2(3, 2, {1, 4, 2, 5, 3, 6}));
}

TEST_CASE("conv2d: identity kernel, all-ones sum, straight-line oracle, gradient, bad extent") {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  const auto x = random_normal({2, 3, 4, 4}, rng);
  Tensor<double> eye({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0;
  CHECK(conv2d(tape.constant(x), tape.constant(eye), 1, 0).value() == x);

  auto nine = conv2d(tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), 1, 0);
  CHECK(nine.value().shape() == Shape{1, 1, 1, 1});
  CHECK(nine.value()[0] == 9.0);

  const auto xi = random_normal({2, 3, 7, 7}, rng);
  const auto k = random_normal({4, 3, 3, 3}, rng);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      if ((7 + 2 * pad - 3) % stride) continue;
      const auto got = conv2d(tape.constant(xi), tape.constant(k), stride, pad).value();
      CHECK(dcan::testing::max_abs_diff(got, conv_oracle(xi, k, stride, pad)) < 1e-12);
    }
  }

  const auto w = random_normal({2, 2, 6, 6}, rng);
  const double err = fd_max_rel_error({random_normal({2, 3, 6, 6}, rng), random_normal({2, 3, 3, 3}, rng)},
                                      contracted([](Tape<double>&, Vars v) { return conv2d(v[0], v[1], 1, 1); }, w));
  CHECK(err < 1e-5);
  CHECK_THROWS_AS(conv2d(tape.constant(Tensor<double>({1, 1, 4, 4})), tape.constant(Tensor<double>({1, 1, 3, 3})), 2, 0),
                  ShapeError);
}

TEST_CASE("global_avg_pool: constant plane, 2x2 mean, uniform backward") {
  Tape<double> tape;
  CHECK(global_avg_pool(tape.constant(Tensor<double>({1, 1, 3, 3}, 7.0))).value()[0] == 7.0);
  CHECK(global_avg_pool(tape.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}))).value()[0] == 2.5);

  Tape<double> t2;
  auto x = t2.variable(Tensor<double>({1, 2, 2, 2}, 1.0));
  t2.backward(sum(global_avg_pool(x)));
  const auto gx = t2.grad(x);
  for (double g : gx.data()) CHECK(g == 0.25);

  std::mt19937_64 rng(3);
  const auto w = random_normal({2, 3}, rng);
  CHECK(fd_max_rel_error({random_normal({2, 3, 4, 5}, rng)},
                         contracted([](Tape<double>&, Vars v) { return global_avg_pool(v[0]); }, w)) < 1e-6);
}

TEST_CASE("softmax: uniform, shift invariance, simplex rows, jacobian products") {
  Tape<double> tape;
  auto u = softmax(tape.constant(Tensor<double>({1, 4}, 0.0)));
  for (double v : u.value().data()) CHECK(v == 0.25);

  // Dyadic values make x + c exact, so equality is bitwise.
  const Tensor<double> x({2, 3}, std::vector<double>{0.5, -1.25, 2.0, 3.75, 0.0, -0.5});
  Tensor<double> shifted = x;
  for (auto& v : shifted.data()) v += 3.0;
  CHECK(softmax(tape.constant(x)).value() == softmax(tape.constant(shifted)).value());

  std::mt19937_64 rng(4);
  const auto big = random_normal({16, 7}, rng, 10.0);
  const auto p = softmax(tape.constant(big)).value();
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      CHECK(p.at(i, k) > 0.0);
      CHECK(p.at(i, k) < 1.0);
      s += p.at(i, k);
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  const auto w = random_normal({3, 5}, rng);
  CHECK(fd_max_rel_error({random_normal({3, 5}, rng)},
                         contracted([](Tape<double>&, Vars v) { return softmax(v[0]); }, w)) < 1e-5);
}

TEST_CASE("every remaining elementwise and reduction op matches central differences") {
  std::mt19937_64 rng(5);
  const auto a = random_normal({3, 4}, rng);
  const auto b = random_uniform({3, 4}, rng, 0.5, 2.0);
  const auto w34 = random_normal({3, 4}, rng);
  struct Case {
    const char* name;
    dcan::testing::ScalarGraph f;
  };
  const std::vector<Case> cases{
      {"add", [](Tape<double>&, Vars v) { return add(v[0], v[1]); }},
      {"sub", [](Tape<double>&, Vars v) { return sub(v[0], v[1]); }},
      {"mul", [](Tape<double>&, Vars v) { return mul(v[0], v[1]); }},
      {"div", [](Tape<double>&, Vars v) { return div(v[0], v[1]); }},
      {"exp", [](Tape<double>&, Vars v) { return exp(v[0]); }},
      {"log", [](Tape<double>&, Vars v) { return log(v[1]); }},
      {"scale", [](Tape<double>&, Vars v) { return scale(v[0], -1.5); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(fd_max_rel_error({a, b}, contracted(c.f, w34)) < 1e-6);
  }
  CHECK(fd_max_rel_error({a}, [](Tape<double>&, Vars v) { return mean(v[0]); }) < 1e-6);
  const auto w31 = random_normal({3, 1}, rng);
  CHECK(fd_max_rel_error({a}, contracted([](Tape<double>&, Vars v) { return row_sum(v[0]); }, w31)) < 1e-6);
}

TEST_CASE("broadcast add and mul agree with a materialised oracle up to rank 4") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> extent(1, 4), rank(1, 4), coin(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    Shape out(static_cast<std::size_t>(rank(rng)));
    for (auto& e : out) e = static_cast<std::size_t>(extent(rng));
    auto operand = [&] {
      const std::size_t drop = std::uniform_int_distribution<std::size_t>(0, out.size() - 1)(rng);
      Shape s(out.begin() + drop, out.end());
      for (auto& e : s) if (coin(rng) == 0) e = 1;
      return s;
    };
    const auto a = random_normal(operand(), rng), b = random_normal(operand(), rng);
    Tape<double> tape;
    const Shape bs = broadcast_shape(a.shape(), b.shape());
    const auto sum_ab = add(tape.constant(a), tape.constant(b)).value();
    const auto prod_ab = mul(tape.constant(a), tape.constant(b)).value();
    REQUIRE(sum_ab.shape() == bs);
    for (std::size_t i = 0; i < sum_ab.numel(); ++i) {
      CHECK(sum_ab[i] == broadcast_at(a, bs, i) + broadcast_at(b, bs, i));
      CHECK(prod_ab[i] == broadcast_at(a, bs, i) * broadcast_at(b, bs, i));
    }
  }
}

TEST_CASE("incompatible broadcast reports both shapes") {
  Tape<double> tape;
  try {
    add(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({4})));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(shape_string({2, 3})) != std::string::npos);
    CHECK(msg.find(shape_string({4})) != std::string::npos);
  }
}

TEST_CASE("pairwise_sq_dist and gather_rows match loops; repeated rows accumulate gradient") {
  std::mt19937_64 rng(7);
  const auto a = random_normal({3, 4}, rng), b = random_normal({5, 4}, rng);
  Tape<double> tape;
  const auto d = pairwise_sq_dist(tape.constant(a), tape.constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(d.at(i, j) == doctest::Approx(dcan::testing::sq_dist(a, i, b, j)).epsilon(1e-14));

  auto x = tape.variable(a);
  const std::vector<std::size_t> rows{2, 0, 2};
  auto g = gather_rows(x, std::span<const std::size_t>(rows));
  CHECK(g.value().at(0, 1) == a.at(2, 1));
  tape.backward(sum(g));
  const auto grad = tape.grad(x);
  CHECK(grad.at(2, 0) == 2.0);
  CHECK(grad.at(0, 0) == 1.0);
  CHECK(grad.at(1, 0) == 0.0);
}

TEST_CASE("backward: x*x at 3, unused parameter, accumulation into parameters") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>::scalar(3.0));
  tape.backward(mul(x, x));
  CHECK(tape.grad(x).item() == 6.0);

  Parameter<double> used("used", ParamGroup::backbone, Tensor<double>({2}, 1.5));
  Parameter<double> unused("unused", ParamGroup::backbone, Tensor<double>({2}, 1.0));
  for (int round = 0; round < 2; ++round) {
    Tape<double> t;
    auto p = t.parameter(used);
    CHECK(t.parameter(used).id() == p.id());
    t.parameter(unused);
    t.backward(sum(mul(p, p)));
  }
  CHECK(used.grad == Tensor<double>({2}, 6.0));  // two tapes, 2 * 1.5 each
  CHECK(unused.grad == Tensor<double>({2}, 0.0));
}

TEST_CASE("tape rejects a second backward and non-scalar losses, and reset allows reuse") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(mul(x, x)), ShapeError);
  auto l = sum(mul(x, x));
  tape.backward(l);
  const auto first = tape.grad(x);
  CHECK_THROWS_AS(tape.backward(l), std::logic_error);
  CHECK(tape.grad(x) == first);
  CHECK_THROWS_AS(tape.constant(Tensor<double>({1})), std::logic_error);
  tape.reset();
  auto y = tape.variable(Tensor<double>({2}, 2.0));
  tape.backward(sum(y));
  CHECK(tape.grad(y) == Tensor<double>({2}, 1.0));
}

TEST_CASE("no-grad tape records values without gradients") {
  Tape<double> tape(false);
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  auto y = exp(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.value()[0] == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("ops are bit-reproducible across evaluations") {
  std::mt19937_64 rng(8);
  const auto x = random_normal({2, 3, 8, 8}, rng).cast<float>();
  const auto k = random_normal({4, 3, 4, 4}, rng).cast<float>();
  auto run = [&] {
    Tape<float> tape;
    return softmax(global_avg_pool(conv2d(tape.constant(x), tape.constant(k), 2, 1))).value();
  };
  CHECK(run() == run());
}

}  // TEST_SUITE
