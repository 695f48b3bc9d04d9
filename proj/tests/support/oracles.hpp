#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "escorte/harness/metrics.hpp"
#include "escorte/log.hpp"

namespace escorte::testing {

// Area under the precision/recall staircase: rank every item by explicit
// pairwise comparison (higher score first, ties by input index), then sum
// precision at each cutoff times the recall gained there.
inline std::optional<double> ap_staircase(const std::vector<double>& scores,
                                          const std::vector<std::uint8_t>& positives) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> at(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++rank;
    at[rank] = i;
  }
  std::size_t total = 0;
  for (std::uint8_t p : positives) total += p ? 1 : 0;
  if (total == 0) return std::nullopt;
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (positives[at[k - 1]]) ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(k);
    const double recall = static_cast<double>(tp) / static_cast<double>(total);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

// Direct two-branch evaluation of the latency composite.
inline double inference_time_direct(const harness::LatencyInputs& in, bool alpha_as_prose) {
  const bool pipelined = alpha_as_prose ? in.t_r > in.t_f : in.t_r <= in.t_f;
  if (pipelined) return static_cast<double>(in.w - 1) * in.t_r - in.t_f + in.t_r + in.t_a;
  return -in.t_f + in.t_r + in.t_a;
}

struct ApSweep {
  std::size_t lists = 0;
  std::size_t mismatches = 0;
  double worst = 0.0;
};

// Every label pattern of every length up to max_len, with scores over a
// `levels`-letter alphabet (all score patterns enumerated, so ties appear in
// every position). Tolerance is for summation-order rounding only.
inline ApSweep sweep_average_precision(std::size_t max_len, std::size_t levels, double tol) {
  ApSweep out;
  auto old = set_warning_sink([](std::string_view) {});
  for (std::size_t n = 1; n <= max_len; ++n) {
    std::size_t score_patterns = 1;
    for (std::size_t i = 0; i < n; ++i) score_patterns *= levels;
    std::vector<double> scores(n);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t sp = 0; sp < score_patterns; ++sp) {
      std::size_t code = sp;
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = static_cast<double>(code % levels) * 0.25;
        code /= levels;
      }
      for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
        for (std::size_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1U;
        const auto got = harness::average_precision(scores, labels);
        const auto want = ap_staircase(scores, labels);
        ++out.lists;
        if (got.has_value() != want.has_value()) {
          ++out.mismatches;
          continue;
        }
        if (got) {
          const double err = *got > *want ? *got - *want : *want - *got;
          if (err > out.worst) out.worst = err;
          if (err > tol) ++out.mismatches;
        }
      }
    }
  }
  set_warning_sink(old);
  return out;
}

}  // namespace escorte::testing
