#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "escorte/num/matrix.hpp"

namespace escorte::num {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so
/// every node's inputs precede it; backward() walks the list once in reverse.
/// A Tape is single-owner and not safe to share between threads.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that does not receive a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is tracked.
  Var parameter(Matrix value);

  /// Appends an operation node. `backward` is dropped when no input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  /// Gradient of the last backward() loss w.r.t. node `id`. Zero-filled for
  /// nodes the loss does not depend on; empty for nodes that never need one.
  const Matrix& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_.at(id).inputs.at(k); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds `g` into the gradient of `id` (no-op for constants).
  void accumulate(std::size_t id, const Matrix& g);

  /// Throws ContractError unless `loss` is 1x1.
  void backward(Var loss);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Differentiable primitives. All inputs must live on the same tape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1 x n row to every row of `a`.
Var add_row(Var a, Var bias);
Var add_scalar(Var a, double s);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var relu(Var a);
Var row_softmax(Var a);
/// Sum of all entries, as a 1x1 node.
Var sum(Var a);
/// Mean of a list of 1x1 nodes.
Var mean(std::span<const Var> scalars);
/// Euclidean norm of all entries, as a 1x1 node. The subgradient at zero is 0.
Var l2_norm(Var a);
/// Euclidean norm of each row, as an n x 1 node. The subgradient at zero is 0.
Var row_norms(Var a);
/// Per-row layer normalization with 1 x n scale and offset.
Var layer_norm(Var x, Var gain, Var offset, double eps = 1e-5);
/// Scaled dot-product attention split into `heads` column blocks. Keys whose
/// mask entry is 0 get zero weight; a query row with no visible key outputs zeros.
Var multi_head_attention(Var q, Var k, Var v, std::span<const std::uint8_t> key_mask,
                         std::size_t heads);
/// -log(clamp(p[0, label], 1e-12, 1 - 1e-12)) for a 1 x k probability row.
Var negative_log_likelihood(Var probs, std::size_t label);

}  // namespace escorte::num
