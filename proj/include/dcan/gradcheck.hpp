// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of every differentiable operation,
// the building blocks, the losses and the complete training objective.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcan/autodiff.hpp"
#include "dcan/tensor.hpp"

namespace dcan::gradcheck {

struct Result {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;  ///< coordinates compared
  std::size_t skipped = 0;  ///< coordinates whose perturbation crossed a kink

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor): relative error,
/// falling back to absolute error for vanishing gradients.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// One perturbable coordinate block and its analytic gradient.
template <typename T>
struct Probe {
  std::span<T> values;
  std::vector<double> analytic;
};

/// Value of the function at the current coordinates plus the branch signature
/// of the evaluation (ReLU signs, clamp activations).
struct Evaluation {
  double value = 0.0;
  std::uint64_t signature = 0;
};

/// Compares each probe's analytic gradient against the fourth-order central
/// difference (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h on at most
/// `per_probe` evenly spaced coordinates. Coordinates where a perturbed evaluation changes the
/// branch signature are skipped. The error floor is `floor * max(1, |f(x)|)`.
template <typename T>
Result compare(std::string name, double tolerance, double step, std::vector<Probe<T>>& probes,
               const std::function<Evaluation()>& evaluate, std::size_t per_probe = 24, double floor = 1e-6);

/// The whole suite. Smooth primitive operations are held to 1e-6, composite
/// blocks, losses and the full objective to 1e-4. At float precision the
/// difference quotients are only accurate to a few digits, so that run is a
/// smoke test: tolerance 2e-2 with an absolute floor of 1e-2 scaled by |f|.
template <typename T>
std::vector<Result> run_suite(std::uint64_t seed = 0);

extern template Result compare<float>(std::string, double, double, std::vector<Probe<float>>&,
                                      const std::function<Evaluation()>&, std::size_t, double);
extern template Result compare<double>(std::string, double, double, std::vector<Probe<double>>&,
                                       const std::function<Evaluation()>&, std::size_t, double);
extern template std::vector<Result> run_suite<float>(std::uint64_t);
extern template std::vector<Result> run_suite<double>(std::uint64_t);

}  // namespace dcan::gradcheck
