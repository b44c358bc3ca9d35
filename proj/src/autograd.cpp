#include "gare/autograd.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace gare::ag {

namespace {

constexpr std::array kOps{
    OpKind::matmul,      OpKind::add,          OpKind::sub,         OpKind::mul,
    OpKind::scalar_mul,  OpKind::row_softmax,  OpKind::exp,         OpKind::log,
    OpKind::l2_norm_rows, OpKind::cosine_rows, OpKind::mean,        OpKind::variance,
    OpKind::logsumexp,   OpKind::negate,       OpKind::clamp_min,   OpKind::square,
    OpKind::transpose,   OpKind::reshape,      OpKind::gather_rows, OpKind::segment_mean,
    OpKind::mix_rows,
};

std::atomic<int> g_fault_op{-1};

std::size_t arity(OpKind kind) {
  switch (kind) {
    case OpKind::leaf:
      return 0;
    case OpKind::matmul:
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
    case OpKind::cosine_rows:
    case OpKind::mix_rows:
      return 2;
    default:
      return 1;
  }
}

void require_same(const Matrix& a, const Matrix& b, OpKind kind) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op_name(kind)) + ": operand shapes " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
}

Matrix map(const Matrix& a, double (*fn)(double)) {
  Matrix out = a;
  for (auto& v : out.values()) v = fn(v);
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row_span(r);
    auto o = out.row_span(r);
    const double m = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - m);
      s += o[c];
    }
    for (auto& v : o) v /= s;
  }
  return out;
}

void accumulate(std::optional<Matrix>& slot, Matrix g) {
  if (!slot) {
    slot = std::move(g);
    return;
  }
  for (std::size_t k = 0; k < g.size(); ++k) (*slot)[k] += g[k];
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::row_softmax: return "row_softmax";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::l2_norm_rows: return "l2_norm_rows";
    case OpKind::cosine_rows: return "cosine_rows";
    case OpKind::mean: return "mean";
    case OpKind::variance: return "variance";
    case OpKind::logsumexp: return "logsumexp";
    case OpKind::negate: return "negate";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::square: return "square";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::segment_mean: return "segment_mean";
    case OpKind::mix_rows: return "mix_rows";
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (OpKind k : kOps)
    if (op_name(k) == name) return k;
  return std::nullopt;
}

std::span<const OpKind> all_ops() { return kOps; }

// ---- Var / Gradients -------------------------------------------------------

const Matrix& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("Var::scalar: value is not 1x1");
  return v[0];
}

const Matrix& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id);
  if (it == grads_.end()) {
    throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id));
  }
  return it->second;
}

// ---- Tape ------------------------------------------------------------------

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
  if (kind == OpKind::leaf) throw std::invalid_argument("record: leaf is not an operation");
  if (inputs.size() != arity(kind)) {
    throw std::invalid_argument(std::string("record: ") + std::string(op_name(kind)) +
                                " expects " + std::to_string(arity(kind)) + " inputs");
  }
  for (const Var& v : inputs) {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw std::invalid_argument("record: input belongs to another tape");
    }
  }
  const Matrix& a = nodes_[inputs[0].id].value;
  const Matrix* b = inputs.size() > 1 ? &nodes_[inputs[1].id].value : nullptr;

  Matrix out;
  switch (kind) {
    case OpKind::matmul:
      out = gare::matmul(a, *b);
      break;
    case OpKind::add:
      require_same(a, *b, kind);
      out = gare::add(a, *b);
      break;
    case OpKind::sub:
      require_same(a, *b, kind);
      out = gare::sub(a, *b);
      break;
    case OpKind::mul:
      require_same(a, *b, kind);
      out = hadamard(a, *b);
      break;
    case OpKind::scalar_mul:
      out = scale(a, attrs.scalar);
      break;
    case OpKind::row_softmax:
      if (a.cols() == 0) throw ShapeError("row_softmax: empty rows");
      out = softmax_rows(a);
      break;
    case OpKind::exp:
      out = map(a, [](double x) { return std::exp(x); });
      break;
    case OpKind::log:
      for (double v : a.values())
        if (v <= 0.0) throw DomainError("log: non-positive input " + format_double(v));  // NaN propagates
      out = map(a, [](double x) { return std::log(x); });
      break;
    case OpKind::l2_norm_rows:
      out = Matrix(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) out[r] = l2_norm(a.row_span(r));
      break;
    case OpKind::cosine_rows:
      require_same(a, *b, kind);
      out = Matrix(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double na = l2_norm(a.row_span(r));
        const double nb = l2_norm(b->row_span(r));
        if (na <= kNormFloor || nb <= kNormFloor) {
          throw DomainError("cosine_rows: degenerate norm in row " + std::to_string(r));
        }
        out[r] = dot(a.row_span(r), b->row_span(r)) / (na * nb);
      }
      break;
    case OpKind::mean: {
      if (a.empty()) throw ShapeError("mean: empty input");
      double s = 0.0;
      for (double v : a.values()) s += v;
      out = Matrix(1, 1, s / static_cast<double>(a.size()));
      break;
    }
    case OpKind::variance: {
      if (a.cols() <= attrs.ddof) {
        throw DomainError("variance: need more than " + std::to_string(attrs.ddof) +
                          " entries per row");
      }
      const double n = static_cast<double>(a.cols());
      const double divisor = n - static_cast<double>(attrs.ddof);
      out = Matrix(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row_span(r);
        double m = 0.0;
        for (double v : row) m += v;
        m /= n;
        double s = 0.0;
        for (double v : row) s += (v - m) * (v - m);
        out[r] = s / divisor;
      }
      break;
    }
    case OpKind::logsumexp:
      if (a.cols() == 0) throw ShapeError("logsumexp: empty rows");
      out = Matrix(a.rows(), 1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row_span(r);
        const double m = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - m);
        out[r] = m + std::log(s);
      }
      break;
    case OpKind::negate:
      out = scale(a, -1.0);
      break;
    case OpKind::clamp_min:
      out = a;
      for (auto& v : out.values()) v = std::max(v, attrs.scalar);
      break;
    case OpKind::square:
      out = hadamard(a, a);
      break;
    case OpKind::transpose:
      out = a.transposed();
      break;
    case OpKind::reshape:
      out = a.reshaped(attrs.rows, attrs.cols);
      break;
    case OpKind::gather_rows:
      out = gare::gather_rows(a, attrs.index);
      break;
    case OpKind::segment_mean: {
      if (attrs.index.size() != a.rows()) {
        throw ShapeError("segment_mean: group index length differs from row count");
      }
      out = Matrix(attrs.groups, a.cols());
      std::vector<double> counts(attrs.groups, 0.0);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const std::size_t g = attrs.index[r];
        if (g >= attrs.groups) throw ShapeError("segment_mean: group id out of range");
        counts[g] += 1.0;
        auto src = a.row_span(r);
        auto dst = out.row_span(g);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      for (std::size_t g = 0; g < attrs.groups; ++g)
        if (counts[g] > 0.0)
          for (auto& v : out.row_span(g)) v /= counts[g];
      break;
    }
    case OpKind::mix_rows: {
      if (attrs.index.size() != a.size()) {
        throw ShapeError("mix_rows: index length differs from the weight count");
      }
      out = Matrix(a.rows(), b->cols());
      for (std::size_t p = 0; p < a.rows(); ++p) {
        auto dst = out.row_span(p);
        for (std::size_t k = 0; k < a.cols(); ++k) {
          const std::size_t src_row = attrs.index[p * a.cols() + k];
          if (src_row >= b->rows()) throw ShapeError("mix_rows: row index out of range");
          const double w = a(p, k);
          auto src = b->row_span(src_row);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += w * src[c];
        }
      }
      break;
    }
    case OpKind::leaf:
      break;
  }

  Node n;
  n.kind = kind;
  n.attrs = std::move(attrs);
  n.value = std::move(out);
  for (const Var& v : inputs) {
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Gradients Tape::backward(Var root) const {
  if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
  const Matrix& rv = nodes_.at(root.id).value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ShapeError("backward: root must be 1x1, got " + std::to_string(rv.rows()) + "x" +
                     std::to_string(rv.cols()));
  }
  std::vector<std::optional<Matrix>> grads(root.id + 1);
  grads[root.id] = Matrix(1, 1, 1.0);
  for (std::size_t id = root.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.requires_grad || node.kind == OpKind::leaf) continue;
    backward_node(node, *grads[id], grads);
  }
  Gradients result;
  for (std::size_t id = 0; id <= root.id; ++id) {
    const Node& node = nodes_[id];
    if (node.kind != OpKind::leaf || !node.requires_grad) continue;
    result.grads_.emplace(id, grads[id] ? std::move(*grads[id])
                                        : Matrix(node.value.rows(), node.value.cols()));
  }
  for (std::size_t id = root.id + 1; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.kind == OpKind::leaf && node.requires_grad) {
      result.grads_.emplace(id, Matrix(node.value.rows(), node.value.cols()));
    }
  }
  return result;
}

void Tape::backward_node(const Node& node, const Matrix& g,
                         std::vector<std::optional<Matrix>>& grads) const {
  const std::size_t ia = node.inputs[0];
  const Matrix& a = nodes_[ia].value;
  const bool need_a = nodes_[ia].requires_grad;
  const std::size_t ib = node.inputs.size() > 1 ? node.inputs[1] : ia;
  const Matrix& b = nodes_[ib].value;
  const bool need_b = node.inputs.size() > 1 && nodes_[ib].requires_grad;
  const Matrix& y = node.value;

  const double fault =
      g_fault_op.load() == static_cast<int>(node.kind) ? 1.0 + 1e-3 : 1.0;
  auto push = [&](std::size_t id, Matrix m) {
    if (fault != 1.0)
      for (auto& v : m.values()) v *= fault;
    accumulate(grads[id], std::move(m));
  };

  switch (node.kind) {
    case OpKind::matmul:
      if (need_a) push(ia, gare::matmul(g, b.transposed()));
      if (need_b) push(ib, gare::matmul(a.transposed(), g));
      break;
    case OpKind::add:
      if (need_a) push(ia, g);
      if (need_b) push(ib, g);
      break;
    case OpKind::sub:
      if (need_a) push(ia, g);
      if (need_b) push(ib, scale(g, -1.0));
      break;
    case OpKind::mul:
      if (need_a) push(ia, hadamard(g, b));
      if (need_b) push(ib, hadamard(g, a));
      break;
    case OpKind::scalar_mul:
      push(ia, scale(g, node.attrs.scalar));
      break;
    case OpKind::row_softmax: {
      Matrix d(y.rows(), y.cols());
      for (std::size_t r = 0; r < y.rows(); ++r) {
        const double inner = dot(g.row_span(r), y.row_span(r));
        for (std::size_t c = 0; c < y.cols(); ++c) d(r, c) = y(r, c) * (g(r, c) - inner);
      }
      push(ia, std::move(d));
      break;
    }
    case OpKind::exp:
      push(ia, hadamard(g, y));
      break;
    case OpKind::log: {
      Matrix d = g;
      for (std::size_t k = 0; k < d.size(); ++k) d[k] /= a[k];
      push(ia, std::move(d));
      break;
    }
    case OpKind::l2_norm_rows: {
      Matrix d(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        if (y[r] == 0.0) continue;
        const double s = g[r] / y[r];
        for (std::size_t c = 0; c < a.cols(); ++c) d(r, c) = s * a(r, c);
      }
      push(ia, std::move(d));
      break;
    }
    case OpKind::cosine_rows: {
      // d cos / d a = b / (|a||b|) - cos * a / |a|^2, and symmetrically for b.
      Matrix da(a.rows(), a.cols());
      Matrix db(b.rows(), b.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double na = l2_norm(a.row_span(r));
        const double nb = l2_norm(b.row_span(r));
        const double c = y[r];
        for (std::size_t k = 0; k < a.cols(); ++k) {
          da(r, k) = g[r] * (b(r, k) / (na * nb) - c * a(r, k) / (na * na));
          db(r, k) = g[r] * (a(r, k) / (na * nb) - c * b(r, k) / (nb * nb));
        }
      }
      if (need_a) push(ia, std::move(da));
      if (need_b) push(ib, std::move(db));
      break;
    }
    case OpKind::mean:
      push(ia, Matrix(a.rows(), a.cols(), g[0] / static_cast<double>(a.size())));
      break;
    case OpKind::variance: {
      const double n = static_cast<double>(a.cols());
      const double divisor = n - static_cast<double>(node.attrs.ddof);
      Matrix d(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double m = 0.0;
        for (double v : a.row_span(r)) m += v;
        m /= n;
        for (std::size_t c = 0; c < a.cols(); ++c)
          d(r, c) = g[r] * 2.0 * (a(r, c) - m) / divisor;
      }
      push(ia, std::move(d));
      break;
    }
    case OpKind::logsumexp: {
      Matrix d = softmax_rows(a);
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (auto& v : d.row_span(r)) v *= g[r];
      push(ia, std::move(d));
      break;
    }
    case OpKind::negate:
      push(ia, scale(g, -1.0));
      break;
    case OpKind::clamp_min: {
      // Ties at the floor get zero gradient.
      Matrix d = g;
      for (std::size_t k = 0; k < d.size(); ++k)
        if (!(a[k] > node.attrs.scalar)) d[k] = 0.0;
      push(ia, std::move(d));
      break;
    }
    case OpKind::square: {
      Matrix d = hadamard(g, a);
      for (auto& v : d.values()) v *= 2.0;
      push(ia, std::move(d));
      break;
    }
    case OpKind::transpose:
      push(ia, g.transposed());
      break;
    case OpKind::reshape:
      push(ia, g.reshaped(a.rows(), a.cols()));
      break;
    case OpKind::gather_rows: {
      Matrix d(a.rows(), a.cols());
      const auto& index = node.attrs.index;
      for (std::size_t r = 0; r < index.size(); ++r) {
        auto src = g.row_span(r);
        auto dst = d.row_span(index[r]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      push(ia, std::move(d));
      break;
    }
    case OpKind::segment_mean: {
      const auto& index = node.attrs.index;
      std::vector<double> counts(node.attrs.groups, 0.0);
      for (std::size_t gid : index) counts[gid] += 1.0;
      Matrix d(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const std::size_t gid = index[r];
        auto src = g.row_span(gid);
        auto dst = d.row_span(r);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / counts[gid];
      }
      push(ia, std::move(d));
      break;
    }
    case OpKind::mix_rows: {
      const auto& index = node.attrs.index;
      Matrix dw(a.rows(), a.cols());
      Matrix dx(b.rows(), b.cols());
      for (std::size_t p = 0; p < a.rows(); ++p) {
        auto gp = g.row_span(p);
        for (std::size_t k = 0; k < a.cols(); ++k) {
          const std::size_t r = index[p * a.cols() + k];
          auto src = b.row_span(r);
          auto dst = dx.row_span(r);
          const double w = a(p, k);
          double acc = 0.0;
          for (std::size_t c = 0; c < gp.size(); ++c) {
            acc += gp[c] * src[c];
            dst[c] += w * gp[c];
          }
          dw(p, k) = acc;
        }
      }
      if (need_a) push(ia, std::move(dw));
      if (need_b) push(ib, std::move(dx));
      break;
    }
    case OpKind::leaf:
      break;
  }
}

// ---- helpers ---------------------------------------------------------------

namespace {

Var unary(OpKind kind, Var a, OpAttrs attrs = {}) {
  const std::array in{a};
  return a.tape->record(kind, in, std::move(attrs));
}

Var binary(OpKind kind, Var a, Var b) {
  const std::array in{a, b};
  return a.tape->record(kind, in);
}

}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::matmul, a, b); }
Var add(Var a, Var b) { return binary(OpKind::add, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::mul, a, b); }
Var cosine_rows(Var a, Var b) { return binary(OpKind::cosine_rows, a, b); }

Var scalar_mul(Var a, double s) {
  OpAttrs at;
  at.scalar = s;
  return unary(OpKind::scalar_mul, a, std::move(at));
}

Var row_softmax(Var a) { return unary(OpKind::row_softmax, a); }
Var exp(Var a) { return unary(OpKind::exp, a); }
Var log(Var a) { return unary(OpKind::log, a); }
Var l2_norm_rows(Var a) { return unary(OpKind::l2_norm_rows, a); }
Var mean(Var a) { return unary(OpKind::mean, a); }

Var variance(Var a, std::size_t ddof) {
  OpAttrs at;
  at.ddof = ddof;
  return unary(OpKind::variance, a, std::move(at));
}

Var logsumexp(Var a) { return unary(OpKind::logsumexp, a); }
Var negate(Var a) { return unary(OpKind::negate, a); }

Var clamp_min(Var a, double floor) {
  OpAttrs at;
  at.scalar = floor;
  return unary(OpKind::clamp_min, a, std::move(at));
}

Var square(Var a) { return unary(OpKind::square, a); }
Var transpose(Var a) { return unary(OpKind::transpose, a); }

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  OpAttrs at;
  at.rows = rows;
  at.cols = cols;
  return unary(OpKind::reshape, a, std::move(at));
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  OpAttrs at;
  at.index = std::move(index);
  return unary(OpKind::gather_rows, a, std::move(at));
}

Var segment_mean(Var a, std::vector<std::size_t> group_of_row, std::size_t groups) {
  OpAttrs at;
  at.index = std::move(group_of_row);
  at.groups = groups;
  return unary(OpKind::segment_mean, a, std::move(at));
}

Var mix_rows(Var weights, Var rows, std::vector<std::size_t> index) {
  OpAttrs at;
  at.index = std::move(index);
  const Var in[] = {weights, rows};
  return weights.tape->record(OpKind::mix_rows, in, std::move(at));
}

Var add_scalar(Var a, double c) {
  Var k = a.tape->constant(Matrix(a.rows(), a.cols(), c));
  return add(a, k);
}

namespace testing {
void inject_backward_fault(std::optional<OpKind> kind) {
  g_fault_op.store(kind ? static_cast<int>(*kind) : -1);
}
}  // namespace testing

}  // namespace gare::ag
