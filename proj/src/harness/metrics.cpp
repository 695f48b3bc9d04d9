#include "escorte/harness/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "escorte/error.hpp"
#include "escorte/log.hpp"

namespace escorte::harness {

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) {
    throw ShapeError("average_precision: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(positives.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double total = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (positives[order[rank]]) {
      ++hits;
      total += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) {
    warn("average precision undefined for a class with no positives; class excluded");
    return std::nullopt;
  }
  return total / static_cast<double>(hits);
}

double mean_ap(std::span<const double> per_class) {
  if (per_class.empty()) throw ContractError("mean_ap of an empty list");
  return std::accumulate(per_class.begin(), per_class.end(), 0.0) /
         static_cast<double>(per_class.size());
}

ConfusionMatrix confusion_matrix(const std::vector<action::ActionState>& predictions,
                                 const std::vector<action::ActionState>& truths) {
  if (predictions.size() != truths.size()) {
    throw ShapeError("confusion_matrix: " + std::to_string(predictions.size()) +
                     " predictions for " + std::to_string(truths.size()) + " labels");
  }
  ConfusionMatrix m{};
  for (std::size_t i = 0; i < truths.size(); ++i)
    ++m[action::index_of(truths[i])][action::index_of(predictions[i])];
  return m;
}

double inference_time(const LatencyInputs& in, bool alpha_as_prose) {
  if (in.w == 0 || !(in.t_r > 0.0) || !(in.t_f > 0.0) || !(in.t_a > 0.0)) {
    throw ContractError("inference_time: w must be >= 1 and all times positive");
  }
  bool gate = in.t_r <= in.t_f;
  if (alpha_as_prose) gate = !gate;
  const double alpha = gate ? 1.0 : 0.0;
  return alpha * (static_cast<double>(in.w - 1) * in.t_r) - in.t_f + in.t_r + in.t_a;
}

}  // namespace escorte::harness
