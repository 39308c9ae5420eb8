#pragma once

#include "avmoe/core/tape.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace avmoe {

/// Builds a scalar on `tape` from leaf variables, one per checked input.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t input = 0;   ///< input holding the worst coordinate
  Index coordinate = 0;    ///< flat row-major index within that input
};

/// Compares reverse-mode gradients against central differences. The error of
/// a coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Throws NumericError naming the coordinate if f is non-finite nearby.
GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> inputs, double eps);

/// Single-input convenience form returning just the maximum relative error.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double eps);

/// Same comparison with respect to parameters bound inside `f`. Only the
/// parameters whose names start with one of `prefixes` are perturbed (all
/// when empty). Gradients already stored in the parameters are cleared.
GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& f, ParameterStore& store, double eps,
                                      const std::vector<std::string>& prefixes = {});

}  // namespace avmoe
