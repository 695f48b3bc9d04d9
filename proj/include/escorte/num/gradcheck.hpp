#pragma once

#include <functional>
#include <span>
#include <vector>

#include "escorte/num/matrix.hpp"
#include "escorte/num/tape.hpp"

namespace escorte::num {

/// Builds a scalar loss on `tape` from the bound parameters.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

/// Compares tape gradients with central differences of step `eps`.
/// Returns max over all entries of |analytic - numeric| / max(1, |analytic|).
double grad_check(const LossBuilder& loss, const std::vector<Matrix>& params, double eps = 1e-5);

}  // namespace escorte::num
