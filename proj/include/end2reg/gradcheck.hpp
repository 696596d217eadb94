#pragma once

// Central finite-difference oracles for the autodiff engine.

#include "end2reg/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace end2reg {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

// |a - n|_2 / max(|a|_2, |n|_2), with 0 when both vanish.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Compares backward() of a scalar loss against central differences for every
// coordinate of every tensor in `inputs` (which must be requires_grad leaves).
// Reports the worst per-tensor relative error.
GradCheckResult check_gradient(const std::string& name, const std::function<Tensor()>& loss,
                               std::vector<Tensor> inputs, double tolerance, double h = 1e-5);

// Full Jacobian check of a tensor-valued function: one backward per output
// coordinate, compared column-by-column against central differences.
GradCheckResult check_jacobian(const std::string& name, const std::function<Tensor()>& fn,
                               std::vector<Tensor> inputs, double tolerance, double h = 1e-5);

// Uniform values in [lo, hi] from a seeded generator, as a differentiable leaf.
Tensor random_tensor(Shape shape, unsigned long long seed, double lo = -2.0, double hi = 2.0,
                     bool requires_grad = true);

}  // namespace end2reg

namespace end2reg {

struct SuiteCheck {
  std::string component;
  GradCheckResult result;
};

// Components: tensor, stgs, kpconv, segnet, backbone, matcher.
const std::vector<std::string>& gradcheck_components();

// Runs every finite-difference oracle of the selected component ("" = all).
// wrong_sign flips the analytic gradient of every check (oracle sensitivity).
// Throws std::invalid_argument for an unknown component.
std::vector<SuiteCheck> run_gradcheck_suite(const std::string& component, std::uint64_t seed,
                                            bool wrong_sign = false);

}  // namespace end2reg
