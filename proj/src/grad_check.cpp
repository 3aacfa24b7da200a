#include "admkd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace admkd {

GradCheckReport grad_check(const std::string& name, const MultiScalarFn& f, const std::vector<TensorD>& inputs,
                           double eps, double tolerance) {
  if (!(eps > 0.0)) throw ParameterError("grad_check: eps must be positive");
  std::vector<TensorD> leaves;
  leaves.reserve(inputs.size());
  for (const auto& x : inputs) {
    TensorD leaf(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
    leaf.set_requires_grad(true);
    leaves.push_back(leaf);
  }

  const TensorD loss = f(leaves);
  if (loss.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  if (loss.requires_grad()) loss.backward();

  GradCheckReport report{name, 0.0, tolerance, false};
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic =
        leaf.has_grad() ? std::vector<double>(leaf.grad().begin(), leaf.grad().end())
                        : std::vector<double>(leaf.numel(), 0.0);
    auto values = leaf.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f(leaves).item();
      values[i] = saved - eps;
      const double down = f(leaves).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (!(rel <= report.max_relative_error)) report.max_relative_error = rel;  // NaN sticks
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

GradCheckReport grad_check(const std::string& name, const ScalarFn& f, const TensorD& x, double eps,
                           double tolerance) {
  return grad_check(
      name, [&f](const std::vector<TensorD>& xs) { return f(xs[0]); }, std::vector<TensorD>{x}, eps, tolerance);
}

int run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::ostream& out) {
  std::vector<std::string> failures;
  char line[160];
  std::snprintf(line, sizeof line, "%-40s %14s %10s  %s\n", "op", "max-rel-err", "tol", "result");
  out << line;
  for (const auto& c : cases) {
    GradCheckReport r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {c.name, INFINITY, 1e-4, false};
      out << "  " << c.name << " threw: " << e.what() << '\n';
    }
    std::snprintf(line, sizeof line, "%-40s %14.3e %10.1e  %s\n", c.name.c_str(), r.max_relative_error,
                  r.tolerance, r.passed ? "PASS" : "FAIL");
    out << line;
    if (!r.passed) failures.push_back(c.name);
  }
  out << cases.size() - failures.size() << "/" << cases.size() << " checks passed\n";
  if (failures.empty()) return 0;
  out << "failing:";
  for (const auto& name : failures) out << ' ' << name;
  out << '\n';
  return 1;
}

}  // namespace admkd
