// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsdt/autograd.hpp"
#include "hsdt/rng.hpp"
#include "json.hpp"

namespace hsdt {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// Elementwise error measure: |a - n| / max(|a|, |n|, floor). Each case uses
/// floor = kGradScaleFloor * max|n| over all of its checked elements, so entries far below
/// the case's gradient scale are judged against that scale. Gradients that are exactly zero
/// analytically (a bias feeding batch norm) otherwise compare pure rounding noise.
inline constexpr double kGradScaleFloor = 1e-3;
inline constexpr double kGradErrorFloor = 1e-12;
double relative_error(double analytic, double numeric, double floor = kGradErrorFloor);

/// Differentiable function of some input tensors and parameters. `tape` is null on the
/// finite-difference passes.
using GradFn = std::function<Var<double>(Tape<double>* tape, const std::vector<Var<double>>& inputs)>;

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  std::size_t max_elements = 48;  // per leaf tensor; larger leaves are sampled
};

struct GradCheckCase {
  std::string name;
  double max_error = 0.0;
  std::string worst_leaf;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares backward() against central differences of sum(weights * fn(...)) with fixed
/// random weights, for each input tensor and each listed parameter.
GradCheckCase check_gradients(const std::string& name, const GradFn& fn,
                              std::vector<Tensor<double>> inputs,
                              const std::vector<Parameter<double>*>& params, Rng& rng,
                              const GradCheckOptions& options = {});

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const;
  double max_error() const;
  nlohmann::json to_json() const;
};

/// Every differentiable op and layer, ending with the full model on an 8x8x4 cube.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace hsdt
