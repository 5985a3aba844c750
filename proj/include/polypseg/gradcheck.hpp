// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace polypseg {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  double eps = 1e-3;
  double tol = 1e-4;
  std::vector<GradCheckCase> cases;
  bool all_passed = false;
};

/// Central finite-difference verification of every differentiable kernel plus
/// the composed SE block, residual block (with projection) and the dice+BCE
/// loss. Runs in double with fixed seeds; deterministic.
GradCheckReport run_gradcheck(double eps = 1e-3, double tol = 1e-4);

}  // namespace polypseg
