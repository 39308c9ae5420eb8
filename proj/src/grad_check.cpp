#include "avmoe/core/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace avmoe {
namespace {

double evaluate(const ScalarFunction& f, const std::vector<Matrix>& values) {
  Tape tape(false);
  std::vector<Var> vars;
  vars.reserve(values.size());
  for (const Matrix& v : values) vars.push_back(tape.constant(v));
  return f(tape, vars).scalar();
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> inputs, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw PreconditionError("grad_check: eps must lie in [1e-6, 1e-3]");

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& m : inputs) vars.push_back(tape.variable(m));
    Var out = f(tape, vars);
    if (!std::isfinite(out.scalar())) throw NumericError("grad_check: f is non-finite at x");
    tape.backward(out);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Matrix& g = vars[i].grad();
      analytic.push_back(g.size() == 0 ? Matrix::Zero(inputs[i].rows(), inputs[i].cols()) : g);
    }
  }

  GradCheckResult result;
  std::vector<Matrix> probe(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (Index c = 0; c < probe[i].size(); ++c) {
      double& x = probe[i].data()[c];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate(f, probe);
      x = saved - eps;
      const double down = evaluate(f, probe);
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite evaluation at input " + std::to_string(i) +
                           ", coordinate " + std::to_string(c));
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i].data()[c];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_relative_error) result = {err, i, c};
    }
  }
  return result;
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double eps) {
  const Matrix inputs[] = {x};
  return grad_check([&f](Tape& t, std::span<const Var> v) { return f(t, v[0]); },
                    std::span<const Matrix>(inputs), eps)
      .max_relative_error;
}

GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& f, ParameterStore& store, double eps,
                                      const std::vector<std::string>& prefixes) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw PreconditionError("grad_check: eps must lie in [1e-6, 1e-3]");
  auto selected = [&](const std::string& name) {
    if (prefixes.empty()) return true;
    return std::any_of(prefixes.begin(), prefixes.end(),
                       [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
  };
  auto evaluate_store = [&] {
    Tape tape(false);
    return f(tape).scalar();
  };

  store.zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (!std::isfinite(out.scalar())) throw NumericError("grad_check: f is non-finite at the parameters");
    tape.backward(out);
  }

  GradCheckResult result;
  std::size_t index = 0;
  for (auto& [name, p] : store) {
    if (!selected(name)) {
      ++index;
      continue;
    }
    for (Index c = 0; c < p.value.size(); ++c) {
      double& x = p.value.data()[c];
      const double saved = x;
      x = saved + eps;
      const double up = evaluate_store();
      x = saved - eps;
      const double down = evaluate_store();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite evaluation at parameter " + name + ", coordinate " +
                           std::to_string(c));
      const double numeric = (up - down) / (2.0 * eps);
      const double a = p.grad.data()[c];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > result.max_relative_error) result = {err, index, c};
    }
    ++index;
  }
  return result;
}

}  // namespace avmoe
