// Finite-difference certification of every backward rule, the closed-form
// contrastive gradients, the regularizers and psi.
//
// Each check draws seeded random instances, compares the analytic gradient
// with fourth-order central differences (step h) input by input, and keeps
// the worst relative error ||a - n|| / max(||a||, ||n||, kGradientFloor).

#ifndef GARE_GRADCHECK_HPP
#define GARE_GRADCHECK_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gare/autograd.hpp"

namespace gare {

/// Gradients with norm below this are compared absolutely.
inline constexpr double kGradientFloor = 1e-8;

struct GradcheckOptions {
  std::size_t instances = 100;
  double step = 1e-5;
  double threshold = 1e-5;
  std::uint64_t seed = 20240601;
};

struct CheckResult {
  std::string name;
  std::size_t instances = 0;
  double worst_relative_error = 0.0;
  double threshold = 0.0;
  bool passed() const { return worst_relative_error < threshold; }
};

/// Module names accepted by run_gradcheck.
const std::vector<std::string>& gradcheck_modules();  // all, ops, contrastive, regularizers, psi

/// Throws std::invalid_argument on an unknown module name.
std::vector<CheckResult> run_gradcheck(const std::string& module, const GradcheckOptions& options = {});

/// Builds a scalar root from leaves holding `inputs`.
using GraphBuilder = std::function<ag::Var(ag::Tape&, const std::vector<ag::Var>&)>;

/// Worst relative error over the inputs flagged in `differentiable`.
double finite_difference_error(const GraphBuilder& build, const std::vector<Matrix>& inputs,
                               const std::vector<bool>& differentiable, double step);

}  // namespace gare

#endif  // GARE_GRADCHECK_HPP
