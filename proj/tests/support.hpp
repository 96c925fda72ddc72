// SPDX-License-Identifier: Apache-2.0
//
// Independent oracles shared by the unit tests. Nothing here calls into the
// library's own finite-difference or loss code.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "dcan/autodiff.hpp"
#include "dcan/ops.hpp"
#include "dcan/tensor.hpp"

namespace dcan::testing {

inline Tensor<double> random_normal(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline Tensor<double> random_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

/// Scalar function of several f64 inputs, built on a fresh tape.
using ScalarGraph = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Max relative error between the tape gradient and a plain central
/// difference (step h) over every coordinate of every input.
inline double fd_max_rel_error(std::vector<Tensor<double>> inputs, const ScalarGraph& f, double h = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto value = [&] {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    return f(tape, vars).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + h;
      const double up = value();
      inputs[k][i] = x0 - h;
      const double down = value();
      inputs[k][i] = x0;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Contracts a tensor-valued graph against fixed weights so it can be checked
/// with fd_max_rel_error.
inline ScalarGraph contracted(const ScalarGraph& f, const Tensor<double>& weights) {
  return [f, weights](Tape<double>& t, std::span<const Var<double>> v) {
    return sum(mul(f(t, v), t.constant(weights)));
  };
}

/// Like fd_max_rel_error, but perturbs a bound parameter. `f` records the
/// scalar on the given tape and must read the parameter via tape.parameter.
template <typename T>
double fd_param_max_rel_error(Parameter<T>& p, const std::function<Var<T>(Tape<T>&)>& f, double h = 1e-6) {
  p.zero_grad();
  {
    Tape<T> tape;
    tape.backward(f(tape));
  }
  const Tensor<T> analytic = p.grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    const T x0 = p.value[i];
    p.value[i] = x0 + h;
    Tape<T> up_tape(false);
    const double up = f(up_tape).item();
    p.value[i] = x0 - h;
    Tape<T> down_tape(false);
    const double down = f(down_tape).item();
    p.value[i] = x0;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
  }
  return worst;
}

// MMD ------------------------------------------------------------------------

inline double sq_dist(const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.dim(1); ++d) {
    const double diff = a.at(i, d) - b.at(j, d);
    s += diff * diff;
  }
  return s;
}

/// Median of squared distances over unordered pairs of the pooled rows.
inline double median_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  std::vector<std::pair<const Tensor<double>*, std::size_t>> rows;
  for (std::size_t i = 0; i < a.dim(0); ++i) rows.emplace_back(&a, i);
  for (std::size_t i = 0; i < b.dim(0); ++i) rows.emplace_back(&b, i);
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      d.push_back(sq_dist(*rows[i].first, rows[i].second, *rows[j].first, rows[j].second));
    }
  }
  if (d.empty()) return 0.0;
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

inline double kernel_oracle(double d2, double base, const std::vector<double>& multipliers) {
  double k = 0.0;
  for (double m : multipliers) k += std::exp(-d2 / (2.0 * m * base));
  return k;
}

/// Explicit double-loop biased MMD with a given base bandwidth.
inline double mmd_oracle(const Tensor<double>& a, const Tensor<double>& b, double base,
                         const std::vector<double>& multipliers) {
  const double na = double(a.dim(0)), nb = double(b.dim(0));
  double aa = 0.0, ab = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(0); ++j) aa += kernel_oracle(sq_dist(a, i, a, j), base, multipliers);
  }
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(0); ++j) ab += kernel_oracle(sq_dist(a, i, b, j), base, multipliers);
  }
  for (std::size_t i = 0; i < b.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(0); ++j) bb += kernel_oracle(sq_dist(b, i, b, j), base, multipliers);
  }
  return aa / (na * na) - 2.0 * ab / (na * nb) + bb / (nb * nb);
}

/// Same as mmd_oracle with the median-heuristic base (floored at 1e-6).
inline double mmd_median_oracle(const Tensor<double>& a, const Tensor<double>& b,
                                const std::vector<double>& multipliers) {
  return mmd_oracle(a, b, std::max(median_oracle(a, b), 1e-6), multipliers);
}

inline Tensor<double> select_rows(const Tensor<double>& x, std::span<const std::size_t> rows) {
  Tensor<double> out({rows.size(), x.dim(1)});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t d = 0; d < x.dim(1); ++d) out.at(r, d) = x.at(rows[r], d);
  }
  return out;
}

}  // namespace dcan::testing
