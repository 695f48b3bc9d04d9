#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "escorte/action/action.hpp"

namespace escorte::harness {

/// Ranked average precision: items sorted by descending score (ties keep
/// input order), AP = mean over positives of precision at that positive's
/// rank. Returns nullopt, after a warning, when there are no positives.
/// Throws ShapeError if the spans differ in length.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> positives);

/// Arithmetic mean. Throws ContractError on an empty list.
double mean_ap(std::span<const double> per_class);

/// counts[truth][predicted].
using ConfusionMatrix = std::array<std::array<std::size_t, action::kNumClasses>, action::kNumClasses>;

/// Throws ShapeError on a length mismatch.
ConfusionMatrix confusion_matrix(const std::vector<action::ActionState>& predictions,
                                 const std::vector<action::ActionState>& truths);

struct LatencyInputs {
  std::size_t w = action::kDefaultWindow;
  double t_r = 0.0;  // re-identification time per frame, s
  double t_f = 0.0;  // inter-frame gap, s
  double t_a = 0.0;  // action recognition time per window, s
};

/// Joint inference time
///   t_i = alpha * (w - 1) * t_r - t_f + t_r + t_a,  alpha = 1 if t_r <= t_f else 0.
/// With `alpha_as_prose` the gate is flipped (alpha = 1 if t_r > t_f).
/// Throws ContractError unless w >= 1 and all times are positive.
double inference_time(const LatencyInputs& in, bool alpha_as_prose = false);

}  // namespace escorte::harness
