#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "admkd/tensor.hpp"

namespace admkd {

struct GradCheckReport {
  std::string op_name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Scalar-valued function of several tensors, evaluated in double precision.
using MultiScalarFn = std::function<TensorD(const std::vector<TensorD>&)>;
using ScalarFn = std::function<TensorD(const TensorD&)>;

/// Compares the reverse-mode gradient of `f` at `inputs` against central
/// differences (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε. Relative error per element is
/// |a − n| / max(|a|, |n|, 1e-8); the report holds the maximum over all inputs.
GradCheckReport grad_check(const std::string& name, const MultiScalarFn& f, const std::vector<TensorD>& inputs,
                           double eps = 1e-4, double tolerance = 1e-4);

GradCheckReport grad_check(const std::string& name, const ScalarFn& f, const TensorD& x, double eps = 1e-4,
                           double tolerance = 1e-4);

/// A named, seeded check in the suite run by `admkd gradcheck`.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport()> run;
};

/// Every registered op and loss, on seeded random small instances.
std::vector<GradCheckCase> default_gradcheck_registry(std::uint64_t seed = 1234);

/// Runs the cases, prints a pass/fail table and returns 0 iff every case
/// passed, 1 otherwise (failing names are listed at the end).
int run_gradcheck_suite(const std::vector<GradCheckCase>& cases, std::ostream& out);

}  // namespace admkd
