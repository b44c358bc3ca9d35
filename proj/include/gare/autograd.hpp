// Reverse-mode differentiation over a closed set of matrix primitives.
//
// A Tape records primitives in execution order; every entry's inputs are
// earlier entries, so one reverse sweep visits each entry exactly once.
// Vars are lightweight handles (tape pointer + node id) and are only valid
// while their tape is alive. Tapes are neither copyable nor movable.

#ifndef GARE_AUTOGRAD_HPP
#define GARE_AUTOGRAD_HPP

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gare/tensorcore.hpp"

namespace gare::ag {

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,          // element-wise
  scalar_mul,   // attrs.scalar
  row_softmax,
  exp,
  log,
  l2_norm_rows,  // N x D -> N x 1
  cosine_rows,   // (N x D, N x D) -> N x 1
  mean,          // all entries -> 1 x 1
  variance,      // per row -> N x 1, divisor cols - attrs.ddof
  logsumexp,     // per row -> N x 1
  negate,
  clamp_min,     // max(x, attrs.scalar)
  square,
  // Structural primitives needed to lay B*B pairs and per-item token sets out
  // as flat row blocks.
  transpose,
  reshape,       // attrs.rows x attrs.cols
  gather_rows,   // attrs.index
  segment_mean,  // rows grouped by attrs.index into attrs.groups rows
  mix_rows,      // (P x K weights, N x D rows) -> P x D, row p = sum_k w[p,k] rows[attrs.index[p*K+k]]
};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);
/// Every differentiable primitive (everything except leaf).
std::span<const OpKind> all_ops();

struct OpAttrs {
  double scalar = 0.0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t ddof = 0;
  std::size_t groups = 0;
  std::vector<std::size_t> index;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const;
};

class Gradients {
 public:
  /// Gradient of the root w.r.t. `v`; zeros when v does not reach the root.
  const Matrix& operator[](Var v) const;
  bool contains(Var v) const { return grads_.contains(v.id); }
  const std::unordered_map<std::size_t, Matrix>& by_id() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Matrix> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Computes the forward value of `kind` on `inputs` and appends an entry.
  /// Throws ShapeError on incompatible operands and std::invalid_argument for
  /// OpKind::leaf or a wrong input count.
  Var record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});

  /// Reverse sweep from a 1x1 root. The result holds an entry for every
  /// requires-gradient leaf.
  Gradients backward(Var root) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    Matrix value;
    bool requires_grad = false;
  };

  void backward_node(const Node& node, const Matrix& grad_out,
                     std::vector<std::optional<Matrix>>& grads) const;

  std::vector<Node> nodes_;
};

// ---- recording helpers -----------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scalar_mul(Var a, double s);
Var row_softmax(Var a);
Var exp(Var a);
Var log(Var a);
Var l2_norm_rows(Var a);
Var cosine_rows(Var a, Var b);
Var mean(Var a);
Var variance(Var a, std::size_t ddof = 0);
Var logsumexp(Var a);
Var negate(Var a);
Var clamp_min(Var a, double floor);
Var square(Var a);
Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var gather_rows(Var a, std::vector<std::size_t> index);
Var segment_mean(Var a, std::vector<std::size_t> group_of_row, std::size_t groups);
/// Weighted sum of indexed rows; `index` has weights.rows() * weights.cols() entries.
Var mix_rows(Var weights, Var rows, std::vector<std::size_t> index);

/// a + c for a scalar constant c (recorded as an add against a constant leaf).
Var add_scalar(Var a, double c);

namespace testing {
/// Scales the backward rule of `kind` by (1 + 1e-3) until reset. Used only to
/// prove that gradient certification catches a broken rule.
void inject_backward_fault(std::optional<OpKind> kind);
}  // namespace testing

}  // namespace gare::ag

#endif  // GARE_AUTOGRAD_HPP
