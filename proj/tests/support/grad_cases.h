#pragma once

#include <functional>
#include <string>
#include <vector>

#include "support/oracles.h"

namespace vqvae::testing {

inline constexpr int kGradShapesPerOp = 5;

// One finite-difference scenario per differentiable op; |shape_index| in
// [0, kGradShapesPerOp) picks the operand sizes, |seed| the values.
struct GradCase {
  std::string op;
  std::function<GradCheckResult(uint64_t seed, int shape_index)> run;
};

const std::vector<GradCase>& GradCases();

}  // namespace vqvae::testing
