// The increment predictor psi: single-head cross-attention that maps the
// signed gap eta * (v_j - t_i) (query) and a context token sequence (keys and
// values) to a pair-specific increment delta_ij.
//
//   q_ij   = W_q * eta * (v_j - t_i)
//   a_ijl  = softmax_l( <q_ij, W_k c_l> / sqrt(D) )
//   delta_ij = W_o * sum_l a_ijl W_v c_l
//
// where c_1..c_L are the tokens of the context item (v_j for video context,
// t_i for text context). No biases, no normalization, no residual.

#ifndef GARE_INCREMENTS_HPP
#define GARE_INCREMENTS_HPP

#include <cstddef>
#include <iosfwd>
#include <string>

#include "gare/autograd.hpp"
#include "gare/increment_tensor.hpp"
#include "gare/tensorcore.hpp"

namespace gare {

struct IncrementConfig {
  int eta = +1;                    // sign of the gap fed to the query
  Side context_side = Side::video;
  Side injection_side = Side::text;
};

/// Weights of psi, each D x D.
struct PsiParams {
  Matrix w_q, w_k, w_v, w_o;

  std::size_t dim() const noexcept { return w_q.rows(); }
  /// W_q, W_k, W_v ~ N(0, 1/D); W_o = 0 so the initial increments vanish.
  static PsiParams initialize(std::size_t dim, RngStream& rng);
  void validate() const;
};

/// PsiParams recorded on a tape.
struct PsiVars {
  ag::Var w_q, w_k, w_v, w_o;
};

PsiVars attach(ag::Tape& tape, const PsiParams& params, bool requires_grad = true);

/// Records psi for all B*B pairs. `context_tokens` holds the L tokens of each
/// of the B context items as a (B*L) x D matrix, item-major. Returns the
/// (B*B) x D increment matrix.
ag::Var psi_forward(ag::Var text, ag::Var video, ag::Var context_tokens,
                    std::size_t tokens_per_item, const IncrementConfig& cfg,
                    const PsiVars& params);

/// Convenience evaluation on a private tape.
IncrementTensor psi_forward(const Matrix& text, const Matrix& video,
                            const Matrix& context_tokens, std::size_t tokens_per_item,
                            const IncrementConfig& cfg, const PsiParams& params);

/// Both sides of every pair, laid out (B*B) x D: anchors[i*B+j] = t_i and
/// candidates[i*B+j] = v_j, with delta_ij added on the injection side.
struct PerturbedBatch {
  Matrix anchors;
  Matrix candidates;
  Side side = Side::text;
};

PerturbedBatch apply_increments(const Matrix& text, const Matrix& video,
                                const IncrementTensor& delta, const IncrementConfig& cfg);

// ---- checkpoints -----------------------------------------------------------

/// One JSON header line {"D": ..., "version": 1}, then W_q, W_k, W_v, W_o in
/// the binary matrix format.
void write_checkpoint(std::ostream& out, const PsiParams& params);
PsiParams read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const PsiParams& params);
PsiParams load_checkpoint(const std::string& path);

}  // namespace gare

#endif  // GARE_INCREMENTS_HPP
