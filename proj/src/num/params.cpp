#include "escorte/num/params.hpp"

#include <cmath>
#include <cstring>

#include "escorte/error.hpp"
#include "escorte/num/rng.hpp"

namespace escorte::num {

std::size_t ParamStore::add(std::string name, Matrix value) {
  for (const auto& n : names_) {
    if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParamStore::index(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

std::vector<Var> ParamStore::bind(Tape& tape, bool trainable) const {
  std::vector<Var> out;
  out.reserve(values_.size());
  for (const Matrix& m : values_) out.push_back(trainable ? tape.parameter(m) : tape.constant(m));
  return out;
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    feed(names_[i].data(), names_[i].size());
    const std::uint64_t shape[2] = {values_[i].rows(), values_[i].cols()};
    feed(shape, sizeof(shape));
    feed(values_[i].data().data(), values_[i].size() * sizeof(double));
  }
  return h;
}

std::vector<Matrix> collect_gradients(const std::vector<Var>& bound) {
  std::vector<Matrix> out;
  out.reserve(bound.size());
  for (const Var& v : bound) out.push_back(v.grad());
  return out;
}

void init_fan_in_uniform(Matrix& m, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
}

}  // namespace escorte::num
