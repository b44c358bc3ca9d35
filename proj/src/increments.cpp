#include "gare/increments.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "gare/contrastive.hpp"

namespace gare {

// ---- IncrementTensor -------------------------------------------------------

IncrementTensor::IncrementTensor(std::size_t batch, Matrix delta)
    : batch_(batch), delta_(std::move(delta)) {
  if (delta_.rows() != batch_ * batch_) {
    throw ShapeError("IncrementTensor: expected " + std::to_string(batch_ * batch_) +
                     " rows, got " + std::to_string(delta_.rows()));
  }
  norms_.resize(delta_.rows());
  for (std::size_t p = 0; p < delta_.rows(); ++p) norms_[p] = l2_norm(delta_.row_span(p));
}

IncrementTensor IncrementTensor::zeros(std::size_t batch, std::size_t dim) {
  return IncrementTensor(batch, Matrix(batch * batch, dim));
}

// ---- PsiParams -------------------------------------------------------------

PsiParams PsiParams::initialize(std::size_t dim, RngStream& rng) {
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(dim));
  PsiParams p;
  p.w_q = gaussian_sample(rng, dim, dim, 0.0, std_dev);
  p.w_k = gaussian_sample(rng, dim, dim, 0.0, std_dev);
  p.w_v = gaussian_sample(rng, dim, dim, 0.0, std_dev);
  p.w_o = Matrix(dim, dim);
  return p;
}

void PsiParams::validate() const {
  const std::size_t d = w_q.rows();
  for (const Matrix* m : {&w_q, &w_k, &w_v, &w_o}) {
    if (m->rows() != d || m->cols() != d) throw ShapeError("PsiParams: weights must be D x D");
    if (!m->all_finite()) throw DomainError("PsiParams: non-finite weight");
  }
}

PsiVars attach(ag::Tape& tape, const PsiParams& params, bool requires_grad) {
  params.validate();
  return PsiVars{tape.leaf(params.w_q, requires_grad), tape.leaf(params.w_k, requires_grad),
                 tape.leaf(params.w_v, requires_grad), tape.leaf(params.w_o, requires_grad)};
}

// ---- forward ---------------------------------------------------------------

ag::Var psi_forward(ag::Var text, ag::Var video, ag::Var context_tokens,
                    std::size_t tokens_per_item, const IncrementConfig& cfg,
                    const PsiVars& params) {
  const std::size_t b = text.rows();
  const std::size_t d = text.cols();
  const std::size_t l = tokens_per_item;
  if (video.rows() != b || video.cols() != d) throw ShapeError("psi_forward: text/video shapes differ");
  if (l == 0) throw ShapeError("psi_forward: context needs at least one token");
  if (context_tokens.rows() != b * l || context_tokens.cols() != d) {
    throw ShapeError("psi_forward: context tokens must be (B*L) x D");
  }
  if (params.w_q.rows() != d) throw ShapeError("psi_forward: parameter dimension differs from D");
  if (cfg.eta != 1 && cfg.eta != -1) throw DomainError("psi_forward: eta must be +1 or -1");

  const std::size_t pairs = b * b;

  // Scores split as <vq_j - tq_i, k> = <vq_j, k> - <tq_i, k>, so they come from
  // two B x (B*L) products instead of a (B*B*L) x D expansion.
  ag::Var wq_t = ag::transpose(params.w_q);
  ag::Var keys_t = ag::transpose(ag::matmul(context_tokens, ag::transpose(params.w_k)));
  ag::Var from_text = ag::matmul(ag::matmul(text, wq_t), keys_t);
  ag::Var from_video = ag::matmul(ag::matmul(video, wq_t), keys_t);
  ag::Var values = ag::matmul(context_tokens, ag::transpose(params.w_v));

  // Row (p, l) of the expanded layout pairs query p with token l of its context item.
  const std::size_t width = b * l;
  std::vector<std::size_t> token_rows(pairs * l);
  std::vector<std::size_t> text_cells(pairs * l);
  std::vector<std::size_t> video_cells(pairs * l);
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t i = p / b, j = p % b;
    const std::size_t item = cfg.context_side == Side::video ? j : i;
    for (std::size_t k = 0; k < l; ++k) {
      token_rows[p * l + k] = item * l + k;
      text_cells[p * l + k] = i * width + item * l + k;
      video_cells[p * l + k] = j * width + item * l + k;
    }
  }
  ag::Var gap_scores = ag::sub(ag::gather_rows(ag::reshape(from_video, b * width, 1), video_cells),
                               ag::gather_rows(ag::reshape(from_text, b * width, 1), text_cells));
  ag::Var scores = ag::reshape(gap_scores, pairs, l);
  ag::Var weights = ag::row_softmax(
      ag::scalar_mul(scores, static_cast<double>(cfg.eta) / std::sqrt(static_cast<double>(d))));

  ag::Var mixed = ag::mix_rows(weights, values, std::move(token_rows));
  return ag::matmul(mixed, ag::transpose(params.w_o));
}

IncrementTensor psi_forward(const Matrix& text, const Matrix& video,
                            const Matrix& context_tokens, std::size_t tokens_per_item,
                            const IncrementConfig& cfg, const PsiParams& params) {
  ag::Tape tape;
  PsiVars vars = attach(tape, params, false);
  ag::Var delta = psi_forward(tape.constant(text), tape.constant(video),
                              tape.constant(context_tokens), tokens_per_item, cfg, vars);
  return IncrementTensor(text.rows(), delta.value());
}

PerturbedBatch apply_increments(const Matrix& text, const Matrix& video,
                                const IncrementTensor& delta, const IncrementConfig& cfg) {
  const std::size_t b = text.rows();
  if (!text.same_shape(video) || delta.batch() != b || delta.dim() != text.cols()) {
    throw ShapeError("apply_increments: inconsistent shapes");
  }
  PerturbedBatch out{gather_rows(text, anchor_index(b)), gather_rows(video, candidate_index(b)),
                     cfg.injection_side};
  Matrix& target = cfg.injection_side == Side::text ? out.anchors : out.candidates;
  target = add(target, delta.matrix());
  return out;
}

// ---- checkpoints -----------------------------------------------------------

void write_checkpoint(std::ostream& out, const PsiParams& params) {
  params.validate();
  nlohmann::json header = {{"D", params.dim()}, {"version", 1}};
  out << header.dump() << '\n';
  for (const Matrix* m : {&params.w_q, &params.w_k, &params.w_v, &params.w_o}) write_matrix(out, *m);
}

PsiParams read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("checkpoint: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (!header.contains("D") || header.value("version", 0) != 1) {
    throw FormatError("checkpoint: unsupported header " + line);
  }
  PsiParams p;
  p.w_q = read_matrix(in);
  p.w_k = read_matrix(in);
  p.w_v = read_matrix(in);
  p.w_o = read_matrix(in);
  if (p.dim() != header["D"].get<std::size_t>()) throw FormatError("checkpoint: D mismatch");
  p.validate();
  return p;
}

void save_checkpoint(const std::string& path, const PsiParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, params);
}

PsiParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace gare
