#include "escorte/num/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "escorte/error.hpp"

namespace escorte::num {

namespace {

double evaluate(const LossBuilder& loss, const std::vector<Matrix>& params) {
  Tape tape;
  std::vector<Var> bound;
  bound.reserve(params.size());
  for (const Matrix& p : params) bound.push_back(tape.constant(p));
  return loss(tape, bound).value()(0, 0);
}

}  // namespace

double grad_check(const LossBuilder& loss, const std::vector<Matrix>& params, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> bound;
    for (const Matrix& p : params) bound.push_back(tape.parameter(p));
    tape.backward(loss(tape, bound));
    for (const Var& v : bound) analytic.push_back(v.grad());
  }

  std::vector<Matrix> probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t k = 0; k < probe[i].size(); ++k) {
      const double saved = probe[i][k];
      probe[i][k] = saved + eps;
      const double up = evaluate(loss, probe);
      probe[i][k] = saved - eps;
      const double down = evaluate(loss, probe);
      probe[i][k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][k];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace escorte::num
