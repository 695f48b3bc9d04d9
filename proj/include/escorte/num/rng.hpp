#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace escorte::num {

/// SplitMix64: a 64-bit counter advanced by the golden-ratio increment and
/// passed through the Stafford variant-13 finalizer. The stream is a pure
/// function of (seed, draw index), so results match on every platform.
///
/// Distributions are implemented here rather than via <random> because the
/// standard distributions are not specified bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), counter_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Requires n > 0.
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller (one value per pair of uniforms; no caching).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child generator for stream `index`.
  Rng split(std::uint64_t index) const;

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace escorte::num
