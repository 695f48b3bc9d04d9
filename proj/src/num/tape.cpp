#include "escorte/num/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "escorte/error.hpp"

namespace escorte::num {

const Matrix& Var::value() const { return tape->value(id); }
const Matrix& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError("tape: operand recorded on a different tape");
    node.inputs.push_back(in.id);
    node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_.at(id);
  if (!n.needs_grad) return;
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  n.grad += g;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
  const Matrix& lv = value(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + lv.shape_string());
  }
  for (Node& n : nodes_) {
    if (n.needs_grad) n.grad = Matrix(n.value.rows(), n.value.cols());
  }
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward) n.backward(*this, i);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands on different tapes");
  return *a.tape;
}

Matrix column_block(const Matrix& m, std::size_t c0, std::size_t width) {
  Matrix out(m.rows(), width);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

void put_column_block(Matrix& dst, const Matrix& src, std::size_t c0) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, c0 + c) = src(r, c);
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.record(a.value() + b.value(), {a, b}, [](Tape& tp, std::size_t self) {
    tp.accumulate(tp.input(self, 0), tp.grad(self));
    tp.accumulate(tp.input(self, 1), tp.grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.record(a.value() - b.value(), {a, b}, [](Tape& tp, std::size_t self) {
    tp.accumulate(tp.input(self, 0), tp.grad(self));
    tp.accumulate(tp.input(self, 1), tp.grad(self) * -1.0);
  });
}

Var add_row(Var a, Var bias) {
  Tape& t = same_tape(a, bias);
  const Matrix& x = a.value();
  const Matrix& b = bias.value();
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row: bias " + b.shape_string() + " does not fit " + x.shape_string());
  }
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  return t.record(std::move(out), {a, bias}, [](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    tp.accumulate(tp.input(self, 0), g);
    Matrix gb(1, g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    tp.accumulate(tp.input(self, 1), gb);
  });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v += s;
  return a.tape->record(std::move(out), {a}, [](Tape& tp, std::size_t self) {
    tp.accumulate(tp.input(self, 0), tp.grad(self));
  });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [s](Tape& tp, std::size_t self) {
    tp.accumulate(tp.input(self, 0), tp.grad(self) * s);
  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.record(matmul(a.value(), b.value()), {a, b}, [](Tape& tp, std::size_t self) {
    const std::size_t ia = tp.input(self, 0);
    const std::size_t ib = tp.input(self, 1);
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, matmul_nt(g, tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(tp.value(ia), g));
  });
}

Var transpose(Var a) {
  return a.tape->record(transpose(a.value()), {a}, [](Tape& tp, std::size_t self) {
    tp.accumulate(tp.input(self, 0), transpose(tp.grad(self)));
  });
}

Var relu(Var a) {
  return a.tape->record(relu(a.value()), {a}, [](Tape& tp, std::size_t self) {
    const std::size_t ia = tp.input(self, 0);
    Matrix g = tp.grad(self);
    const Matrix& x = tp.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] <= 0.0) g[i] = 0.0;
    tp.accumulate(ia, g);
  });
}

Var row_softmax(Var a) {
  return a.tape->record(row_softmax(a.value()), {a}, [](Tape& tp, std::size_t self) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix dx(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (g(r, c) - dot);
    }
    tp.accumulate(tp.input(self, 0), dx);
  });
}

Var sum(Var a) {
  return a.tape->record(Matrix(1, 1, sum(a.value())), {a}, [](Tape& tp, std::size_t self) {
    const std::size_t ia = tp.input(self, 0);
    const Matrix& x = tp.value(ia);
    tp.accumulate(ia, Matrix(x.rows(), x.cols(), tp.grad(self)[0]));
  });
}

Var mean(std::span<const Var> scalars) {
  if (scalars.empty()) throw ContractError("mean: empty list");
  Var acc = scalars.front();
  for (std::size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
  return scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

Var l2_norm(Var a) {
  const double n = frobenius_norm(a.value());
  return a.tape->record(Matrix(1, 1, n), {a}, [](Tape& tp, std::size_t self) {
    const std::size_t ia = tp.input(self, 0);
    const double norm = tp.value(self)[0];
    const Matrix& x = tp.value(ia);
    if (norm == 0.0) return;
    tp.accumulate(ia, x * (tp.grad(self)[0] / norm));
  });
}

Var row_norms(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row_span(r)) s += v * v;
    out[r] = std::sqrt(s);
  }
  return a.tape->record(std::move(out), {a}, [](Tape& tp, std::size_t self) {
    const std::size_t ia = tp.input(self, 0);
    const Matrix& x = tp.value(ia);
    const Matrix& norms = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix dx(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      if (norms[r] == 0.0) continue;
      const double k = g[r] / norms[r];
      for (std::size_t c = 0; c < x.cols(); ++c) dx(r, c) = x(r, c) * k;
    }
    tp.accumulate(ia, dx);
  });
}

Var layer_norm(Var x, Var gain, Var offset, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, offset);
  const Matrix& in = x.value();
  const Matrix& g = gain.value();
  const Matrix& b = offset.value();
  const std::size_t n = in.cols();
  if (g.rows() != 1 || g.cols() != n || !b.same_shape(g)) {
    throw ShapeError("layer_norm: gain " + g.shape_string() + "/offset " + b.shape_string() +
                     " do not fit " + in.shape_string());
  }
  Matrix normalized(in.rows(), n);
  std::vector<double> inv_std(in.rows());
  Matrix out(in.rows(), n);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += in(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (in(r, c) - mu) * (in(r, c) - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normalized(r, c) = (in(r, c) - mu) * inv_std[r];
      out(r, c) = g[c] * normalized(r, c) + b[c];
    }
  }
  return t.record(
      std::move(out), {x, gain, offset},
      [normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& tp,
                                                                         std::size_t self) {
        const Matrix& dy = tp.grad(self);
        const Matrix& gv = tp.value(tp.input(self, 1));
        const std::size_t rows = dy.rows();
        const std::size_t cols = dy.cols();
        Matrix dx(rows, cols);
        Matrix dg(1, cols);
        Matrix db(1, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = dy(r, c) * gv[c];
            mean_d += d;
            mean_dx += d * normalized(r, c);
            dg[c] += dy(r, c) * normalized(r, c);
            db[c] += dy(r, c);
          }
          mean_d /= static_cast<double>(cols);
          mean_dx /= static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = dy(r, c) * gv[c];
            dx(r, c) = inv_std[r] * (d - mean_d - normalized(r, c) * mean_dx);
          }
        }
        tp.accumulate(tp.input(self, 0), dx);
        tp.accumulate(tp.input(self, 1), dg);
        tp.accumulate(tp.input(self, 2), db);
      });
}

Var multi_head_attention(Var q, Var k, Var v, std::span<const std::uint8_t> key_mask,
                         std::size_t heads) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  const Matrix& qm = q.value();
  const Matrix& km = k.value();
  const Matrix& vm = v.value();
  if (!qm.same_shape(km) || !qm.same_shape(vm)) {
    throw ShapeError("attention: q/k/v shapes " + qm.shape_string() + " " + km.shape_string() +
                     " " + vm.shape_string());
  }
  if (heads == 0 || qm.cols() % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(qm.cols()) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (key_mask.size() != qm.rows()) {
    throw ShapeError("attention: mask length " + std::to_string(key_mask.size()) + " vs " +
                     std::to_string(qm.rows()) + " positions");
  }
  const std::size_t n = qm.rows();
  const std::size_t dh = qm.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  const bool any_visible = std::any_of(mask.begin(), mask.end(), [](auto m) { return m != 0; });

  std::vector<Matrix> weights;
  weights.reserve(heads);
  Matrix out(n, qm.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix qh = column_block(qm, h * dh, dh);
    const Matrix kh = column_block(km, h * dh, dh);
    const Matrix vh = column_block(vm, h * dh, dh);
    Matrix p = matmul_nt(qh, kh);
    for (std::size_t i = 0; i < n; ++i) {
      if (!any_visible) {
        for (std::size_t j = 0; j < n; ++j) p(i, j) = 0.0;
        continue;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (mask[j]) mx = std::max(mx, p(i, j) * inv_sqrt);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p(i, j) = mask[j] ? std::exp(p(i, j) * inv_sqrt - mx) : 0.0;
        total += p(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) p(i, j) /= total;
    }
    put_column_block(out, matmul(p, vh), h * dh);
    weights.push_back(std::move(p));
  }

  return t.record(std::move(out), {q, k, v},
                  [weights = std::move(weights), heads, dh, inv_sqrt](Tape& tp, std::size_t self) {
                    const std::size_t iq = tp.input(self, 0);
                    const std::size_t ik = tp.input(self, 1);
                    const std::size_t iv = tp.input(self, 2);
                    const Matrix& dout = tp.grad(self);
                    const Matrix& qv = tp.value(iq);
                    const Matrix& kv = tp.value(ik);
                    const Matrix& vv = tp.value(iv);
                    Matrix dq(qv.rows(), qv.cols());
                    Matrix dk(kv.rows(), kv.cols());
                    Matrix dv(vv.rows(), vv.cols());
                    for (std::size_t h = 0; h < heads; ++h) {
                      const Matrix& p = weights[h];
                      const Matrix doh = column_block(dout, h * dh, dh);
                      const Matrix qh = column_block(qv, h * dh, dh);
                      const Matrix kh = column_block(kv, h * dh, dh);
                      const Matrix vh = column_block(vv, h * dh, dh);
                      put_column_block(dv, matmul_tn(p, doh), h * dh);
                      Matrix ds = matmul_nt(doh, vh);
                      for (std::size_t i = 0; i < ds.rows(); ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < ds.cols(); ++j) dot += p(i, j) * ds(i, j);
                        for (std::size_t j = 0; j < ds.cols(); ++j)
                          ds(i, j) = p(i, j) * (ds(i, j) - dot) * inv_sqrt;
                      }
                      put_column_block(dq, matmul(ds, kh), h * dh);
                      put_column_block(dk, matmul_tn(ds, qh), h * dh);
                    }
                    tp.accumulate(iq, dq);
                    tp.accumulate(ik, dk);
                    tp.accumulate(iv, dv);
                  });
}

Var negative_log_likelihood(Var probs, std::size_t label) {
  const Matrix& p = probs.value();
  if (p.rows() != 1 || label >= p.cols()) {
    throw ShapeError("negative_log_likelihood: label " + std::to_string(label) +
                     " out of range for " + p.shape_string());
  }
  constexpr double kLo = 1e-12;
  constexpr double kHi = 1.0 - 1e-12;
  const double raw = p[label];
  const double clamped = std::clamp(raw, kLo, kHi);
  return probs.tape->record(
      Matrix(1, 1, -std::log(clamped)), {probs}, [label, raw](Tape& tp, std::size_t self) {
        if (raw <= kLo || raw >= kHi) return;
        const std::size_t ip = tp.input(self, 0);
        Matrix g(1, tp.value(ip).cols());
        g[label] = -tp.grad(self)[0] / raw;
        tp.accumulate(ip, g);
      });
}

}  // namespace escorte::num
