#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "escorte/num/matrix.hpp"
#include "escorte/num/rng.hpp"
#include "escorte/num/tape.hpp"

namespace escorte::num {

/// Ordered, named collection of weight matrices owned by a model.
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Matrix& at(std::size_t i) { return values_.at(i); }
  const Matrix& at(std::size_t i) const { return values_.at(i); }
  /// Throws ConfigError for unknown names.
  std::size_t index(std::string_view name) const;

  std::vector<Matrix>& values() noexcept { return values_; }
  const std::vector<Matrix>& values() const noexcept { return values_; }

  /// Places every parameter on `tape`, as gradient-tracked leaves when `trainable`.
  std::vector<Var> bind(Tape& tape, bool trainable) const;

  /// FNV-1a over names, shapes and raw bytes of all parameters.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Gradients of bound parameters after Tape::backward().
std::vector<Matrix> collect_gradients(const std::vector<Var>& bound);

/// Fills `m` with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_fan_in_uniform(Matrix& m, std::size_t fan_in, Rng& rng);

}  // namespace escorte::num
