#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "escorte/num/matrix.hpp"

namespace escorte::num {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment optimizer state. Accumulators are created on the first step.
struct OptimizerState {
  AdamConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `params` in place. Throws ShapeError when
/// params, grads and accumulators disagree.
void optimizer_step(std::span<Matrix> params, std::span<const Matrix> grads,
                    OptimizerState& state);

}  // namespace escorte::num
