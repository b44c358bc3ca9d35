// InfoNCE with pair-specific increments.
//
// Two independent routes are provided: closed-form evaluations and gradients
// over plain matrices, and tape-recorded versions used for training. Tests
// check one against the other.
//
// Closed-form gradients carry the 1/tau factor of the temperature-scaled
// logits; with tau = 1 they reduce to the bare (p - y) * [cosine gradient]
// expressions.

#ifndef GARE_CONTRASTIVE_HPP
#define GARE_CONTRASTIVE_HPP

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "gare/autograd.hpp"
#include "gare/increment_tensor.hpp"
#include "gare/tensorcore.hpp"

namespace gare {

/// s[i][j] = cos(t_i (+ delta_ij), v_j (+ delta_ij)) and the temperature used
/// to turn it into logits.
struct SimilarityMatrix {
  Matrix s;
  double tau = 0.01;
};

enum class SoftmaxAxis { rows, columns };

/// Softmax of s / tau along one axis, plus the diagonal labels y.
struct ProbMatrix {
  Matrix p;
  SoftmaxAxis axis = SoftmaxAxis::rows;
  double label(std::size_t i, std::size_t j) const { return i == j ? 1.0 : 0.0; }
};

/// Plain cosine matrix of the rows of T against the rows of V.
SimilarityMatrix pairwise_similarity(const Matrix& text, const Matrix& video, double tau);

/// Cosine matrix with delta_ij injected on `side`. Throws DomainError naming
/// (i, j) when a perturbed norm collapses.
SimilarityMatrix pairwise_similarity(const Matrix& text, const Matrix& video,
                                     const IncrementTensor& delta, Side side, double tau);

/// -log softmax(s_row / tau)[positive], evaluated with max-shifting.
double infonce_anchor(std::span<const double> s_row, std::size_t positive, double tau);

/// Mean text->video anchor loss over rows.
double infonce_text_to_video(const SimilarityMatrix& sim);
/// Mean video->text anchor loss over columns.
double infonce_video_to_text(const SimilarityMatrix& sim);
/// 0.5 * (text->video + video->text).
double infonce_symmetric(const SimilarityMatrix& sim);

ProbMatrix probabilities(const SimilarityMatrix& sim, SoftmaxAxis axis);

/// Gradient of the text->video anchor loss of t_i w.r.t. t_i without
/// increments: (1/tau) sum_j (p_ij - y_ij) [v_j/(|t_i||v_j|) - cos(t_i,v_j) t_i/|t_i|^2].
std::vector<double> grad_anchor_analytic(std::span<const double> anchor, const Matrix& video,
                                         std::span<const double> p_row,
                                         std::span<const double> y_row, double tau);

/// Gradient of the anchor loss w.r.t. one perturbed anchor t_i + delta_ij:
/// (1/tau) (p_ij - y_ij) [v_j/(|t_d||v_j|) - cos(t_d, v_j) t_d/|t_d|^2].
/// Always orthogonal to `perturbed_anchor`.
std::vector<double> grad_perturbed_anchor(std::span<const double> perturbed_anchor,
                                          std::span<const double> candidate, double p,
                                          double y, double tau);

struct GradientFlowReport {
  /// max |autograd d/dt_i - sum_j closed-form d/dt_delta_ij|
  double anchor_deviation = 0.0;
  /// max |autograd d/ddelta_ij - closed-form d/dt_delta_ij|
  double increment_deviation = 0.0;
  Matrix anchor_grad_autograd;
  Matrix anchor_grad_analytic;
  Matrix increment_grad_autograd;  // (B*B) x D, zeros when detached
  double max_deviation() const { return std::max(anchor_deviation, increment_deviation); }
};

/// Checks that t_i and delta_ij share one gradient flow under text-side
/// injection, for L = sum_i L_i (text->video anchor losses). With
/// attach_increments = false the increments are constants on the tape.
GradientFlowReport check_gradient_flow(const Matrix& text, const Matrix& video,
                                       const IncrementTensor& delta, double tau,
                                       bool attach_increments = true);

// ---- tape-recorded versions -----------------------------------------------

/// Row index pairs for the flat (i*B + j) pair layout.
std::vector<std::size_t> anchor_index(std::size_t batch);     // p -> i
std::vector<std::size_t> candidate_index(std::size_t batch);  // p -> j

/// B x B cosine matrix on the tape. `delta` is (B*B) x D when present.
ag::Var similarity_on_tape(ag::Var text, ag::Var video, std::optional<ag::Var> delta,
                           Side side);
ag::Var infonce_text_to_video_on_tape(ag::Var sim, double tau);
ag::Var infonce_symmetric_on_tape(ag::Var sim, double tau);

}  // namespace gare

#endif  // GARE_CONTRASTIVE_HPP
