#include "gare/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gare {

namespace {

void check_pair_shapes(const Matrix& text, const Matrix& video) {
  if (!text.same_shape(video)) {
    throw ShapeError("pairwise_similarity: text " + std::to_string(text.rows()) + "x" +
                     std::to_string(text.cols()) + " vs video " +
                     std::to_string(video.rows()) + "x" + std::to_string(video.cols()));
  }
}

double logsumexp_scaled(std::span<const double> row, double tau) {
  const double m = *std::max_element(row.begin(), row.end()) / tau;
  double s = 0.0;
  for (double v : row) s += std::exp(v / tau - m);
  return m + std::log(s);
}

}  // namespace

SimilarityMatrix pairwise_similarity(const Matrix& text, const Matrix& video, double tau) {
  check_pair_shapes(text, video);
  const std::size_t b = text.rows();
  SimilarityMatrix sim{Matrix(b, b), tau};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) sim.s(i, j) = cosine(text.row_span(i), video.row_span(j));
  return sim;
}

SimilarityMatrix pairwise_similarity(const Matrix& text, const Matrix& video,
                                     const IncrementTensor& delta, Side side, double tau) {
  check_pair_shapes(text, video);
  const std::size_t b = text.rows();
  const std::size_t d = text.cols();
  if (delta.batch() != b || delta.dim() != d) {
    throw ShapeError("pairwise_similarity: increment tensor is for B=" +
                     std::to_string(delta.batch()) + ", D=" + std::to_string(delta.dim()));
  }
  SimilarityMatrix sim{Matrix(b, b), tau};
  std::vector<double> moved(d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      auto base = side == Side::text ? text.row_span(i) : video.row_span(j);
      auto other = side == Side::text ? video.row_span(j) : text.row_span(i);
      auto inc = delta.pair(i, j);
      for (std::size_t k = 0; k < d; ++k) moved[k] = base[k] + inc[k];
      const double nm = l2_norm(moved);
      const double no = l2_norm(other);
      if (nm <= kNormFloor || no <= kNormFloor) {
        throw DomainError("pairwise_similarity: degenerate perturbed norm at pair (" +
                          std::to_string(i) + ", " + std::to_string(j) + ")");
      }
      sim.s(i, j) = dot(moved, other) / (nm * no);
    }
  }
  return sim;
}

double infonce_anchor(std::span<const double> s_row, std::size_t positive, double tau) {
  if (positive >= s_row.size()) throw ShapeError("infonce_anchor: positive index out of range");
  return logsumexp_scaled(s_row, tau) - s_row[positive] / tau;
}

double infonce_text_to_video(const SimilarityMatrix& sim) {
  const std::size_t b = sim.s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) total += infonce_anchor(sim.s.row_span(i), i, sim.tau);
  return total / static_cast<double>(b);
}

double infonce_video_to_text(const SimilarityMatrix& sim) {
  const std::size_t b = sim.s.rows();
  std::vector<double> column(b);
  double total = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t i = 0; i < b; ++i) column[i] = sim.s(i, j);
    total += infonce_anchor(column, j, sim.tau);
  }
  return total / static_cast<double>(b);
}

double infonce_symmetric(const SimilarityMatrix& sim) {
  if (sim.s.rows() != sim.s.cols()) throw ShapeError("infonce_symmetric: matrix is not square");
  return 0.5 * (infonce_text_to_video(sim) + infonce_video_to_text(sim));
}

ProbMatrix probabilities(const SimilarityMatrix& sim, SoftmaxAxis axis) {
  const Matrix& s = sim.s;
  ProbMatrix out{Matrix(s.rows(), s.cols()), axis};
  if (axis == SoftmaxAxis::rows) {
    for (std::size_t i = 0; i < s.rows(); ++i) {
      const double lse = logsumexp_scaled(s.row_span(i), sim.tau);
      for (std::size_t j = 0; j < s.cols(); ++j) out.p(i, j) = std::exp(s(i, j) / sim.tau - lse);
    }
  } else {
    std::vector<double> column(s.rows());
    for (std::size_t j = 0; j < s.cols(); ++j) {
      for (std::size_t i = 0; i < s.rows(); ++i) column[i] = s(i, j);
      const double lse = logsumexp_scaled(column, sim.tau);
      for (std::size_t i = 0; i < s.rows(); ++i) out.p(i, j) = std::exp(column[i] / sim.tau - lse);
    }
  }
  return out;
}

std::vector<double> grad_perturbed_anchor(std::span<const double> perturbed_anchor,
                                          std::span<const double> candidate, double p,
                                          double y, double tau) {
  const std::size_t d = perturbed_anchor.size();
  if (candidate.size() != d) throw ShapeError("grad_perturbed_anchor: length mismatch");
  const double na = l2_norm(perturbed_anchor);
  const double nv = l2_norm(candidate);
  if (na <= kNormFloor || nv <= kNormFloor) {
    throw DomainError("grad_perturbed_anchor: degenerate norm");
  }
  const double c = dot(perturbed_anchor, candidate) / (na * nv);
  const double coeff = (p - y) / tau;
  std::vector<double> g(d);
  for (std::size_t k = 0; k < d; ++k) {
    g[k] = coeff * (candidate[k] / (na * nv) - c * perturbed_anchor[k] / (na * na));
  }
  return g;
}

std::vector<double> grad_anchor_analytic(std::span<const double> anchor, const Matrix& video,
                                         std::span<const double> p_row,
                                         std::span<const double> y_row, double tau) {
  const std::size_t b = video.rows();
  if (p_row.size() != b || y_row.size() != b || video.cols() != anchor.size()) {
    throw ShapeError("grad_anchor_analytic: inconsistent shapes");
  }
  std::vector<double> g(anchor.size(), 0.0);
  for (std::size_t j = 0; j < b; ++j) {
    const auto term = grad_perturbed_anchor(anchor, video.row_span(j), p_row[j], y_row[j], tau);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += term[k];
  }
  return g;
}

GradientFlowReport check_gradient_flow(const Matrix& text, const Matrix& video,
                                       const IncrementTensor& delta, double tau,
                                       bool attach_increments) {
  const std::size_t b = text.rows();
  const std::size_t d = text.cols();

  ag::Tape tape;
  ag::Var t = tape.leaf(text);
  ag::Var v = tape.constant(video);
  ag::Var dl = tape.leaf(delta.matrix(), attach_increments);
  ag::Var sim = similarity_on_tape(t, v, dl, Side::text);
  ag::Var loss = ag::scalar_mul(infonce_text_to_video_on_tape(sim, tau), static_cast<double>(b));
  const ag::Gradients grads = tape.backward(loss);

  GradientFlowReport report;
  report.anchor_grad_autograd = grads[t];
  report.increment_grad_autograd =
      attach_increments ? grads[dl] : Matrix(delta.matrix().rows(), d);

  const SimilarityMatrix s = pairwise_similarity(text, video, delta, Side::text, tau);
  const ProbMatrix p = probabilities(s, SoftmaxAxis::rows);
  report.anchor_grad_analytic = Matrix(b, d);
  std::vector<double> moved(d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      auto inc = delta.pair(i, j);
      for (std::size_t k = 0; k < d; ++k) moved[k] = text(i, k) + inc[k];
      const auto g = grad_perturbed_anchor(moved, video.row_span(j), p.p(i, j), p.label(i, j), tau);
      for (std::size_t k = 0; k < d; ++k) {
        report.anchor_grad_analytic(i, k) += g[k];
        if (attach_increments) {
          report.increment_deviation =
              std::max(report.increment_deviation,
                       std::abs(report.increment_grad_autograd(i * b + j, k) - g[k]));
        }
      }
    }
  }
  report.anchor_deviation = max_abs_diff(report.anchor_grad_autograd, report.anchor_grad_analytic);
  return report;
}

// ---- tape ------------------------------------------------------------------

std::vector<std::size_t> anchor_index(std::size_t batch) {
  std::vector<std::size_t> idx(batch * batch);
  for (std::size_t p = 0; p < idx.size(); ++p) idx[p] = p / batch;
  return idx;
}

std::vector<std::size_t> candidate_index(std::size_t batch) {
  std::vector<std::size_t> idx(batch * batch);
  for (std::size_t p = 0; p < idx.size(); ++p) idx[p] = p % batch;
  return idx;
}

ag::Var similarity_on_tape(ag::Var text, ag::Var video, std::optional<ag::Var> delta,
                           Side side) {
  const std::size_t b = text.rows();
  if (video.rows() != b || video.cols() != text.cols()) {
    throw ShapeError("similarity_on_tape: text and video shapes differ");
  }
  ag::Var anchors = ag::gather_rows(text, anchor_index(b));
  ag::Var candidates = ag::gather_rows(video, candidate_index(b));
  if (delta) {
    if (delta->rows() != b * b || delta->cols() != text.cols()) {
      throw ShapeError("similarity_on_tape: increments must be (B*B) x D");
    }
    if (side == Side::text) {
      anchors = ag::add(anchors, *delta);
    } else {
      candidates = ag::add(candidates, *delta);
    }
  }
  return ag::reshape(ag::cosine_rows(anchors, candidates), b, b);
}

ag::Var infonce_text_to_video_on_tape(ag::Var sim, double tau) {
  const std::size_t b = sim.rows();
  ag::Var logits = ag::scalar_mul(sim, 1.0 / tau);
  ag::Var eye = sim.tape->constant(Matrix::identity(b));
  ag::Var positives = ag::scalar_mul(ag::mean(ag::mul(logits, eye)), static_cast<double>(b));
  return ag::sub(ag::mean(ag::logsumexp(logits)), positives);
}

ag::Var infonce_symmetric_on_tape(ag::Var sim, double tau) {
  if (sim.rows() != sim.cols()) throw ShapeError("infonce_symmetric_on_tape: not square");
  const std::size_t b = sim.rows();
  ag::Var logits = ag::scalar_mul(sim, 1.0 / tau);
  ag::Var eye = sim.tape->constant(Matrix::identity(b));
  ag::Var positives = ag::scalar_mul(ag::mean(ag::mul(logits, eye)), static_cast<double>(b));
  ag::Var rows = ag::mean(ag::logsumexp(logits));
  ag::Var cols = ag::mean(ag::logsumexp(ag::transpose(logits)));
  return ag::sub(ag::scalar_mul(ag::add(rows, cols), 0.5), positives);
}

}  // namespace gare
