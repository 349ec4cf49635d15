#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nnm/tensor.hpp"

namespace nnm {

// One randomized instance: the leaves whose gradients are checked, and a
// closure recomputing the scalar loss from their current values.
struct GradCheckProblem {
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  std::function<Tensor<double>()> loss;
};

struct GradCheckCase {
  std::string op;
  std::function<GradCheckProblem(std::uint64_t seed)> make;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  int seeds = 10;
  // Error of one element is |analytic - numeric| / max(|analytic|, |numeric|, floor)
  // with floor = max(relative_floor * largest |analytic| of that input, absolute_floor).
  double relative_floor = 0.1;
  double absolute_floor = 1e-6;
};

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  int trials = 0;
  bool passed = false;
  std::string worst;  // input name and element index of the largest error
};

// Central-difference check of every element of every input.
double check_gradients(GradCheckProblem& problem, const GradCheckOptions& options,
                       std::string* worst = nullptr);

// One case per differentiable op, plus SE, ILRB and the residual baseline.
std::vector<GradCheckCase> standard_gradcheck_cases();

std::vector<GradCheckResult> run_gradcheck(const std::vector<GradCheckCase>& cases,
                                           const GradCheckOptions& options);

}  // namespace nnm
