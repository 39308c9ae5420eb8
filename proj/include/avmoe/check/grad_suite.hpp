#pragma once

#include <string>
#include <vector>

namespace avmoe::check {

struct GradSuiteEntry {
  std::string module;
  std::string name;
  double max_error = 0.0;
  int seeds = 0;
};

/// Module names accepted by run_grad_suite; "" runs them all.
std::vector<std::string> grad_suite_modules();

/// Finite-difference check of every differentiable exported operation, the
/// worst relative error over `seeds` random instances per operation.
std::vector<GradSuiteEntry> run_grad_suite(const std::string& module = "", int seeds = 20, double eps = 1e-4);

}  // namespace avmoe::check
