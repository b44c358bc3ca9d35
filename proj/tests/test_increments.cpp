#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "gare/contrastive.hpp"
#include "gare/increments.hpp"
#include "helpers.hpp"

using namespace gare;

namespace {

struct Instance {
  Matrix text, video, text_tokens, video_tokens;
  PsiParams params;
  std::size_t l = 0;
};

Instance make_instance(std::uint64_t seed, std::size_t b, std::size_t l, std::size_t d) {
  RngStream rng(seed);
  Instance in;
  in.l = l;
  in.text = gaussian_sample(rng, b, d, 0.0, 1.0);
  in.video = gaussian_sample(rng, b, d, 0.0, 1.0);
  in.text_tokens = gaussian_sample(rng, b * l, d, 0.0, 1.0);
  in.video_tokens = gaussian_sample(rng, b * l, d, 0.0, 1.0);
  in.params = PsiParams::initialize(d, rng);
  in.params.w_o = gaussian_sample(rng, d, d, 0.0, 0.5);
  return in;
}

std::vector<double> matvec(const Matrix& w, const std::vector<double>& x) {
  std::vector<double> y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w(r, c) * x[c];
  return y;
}

// Straight per-pair evaluation of the attention formula.
std::vector<double> oracle_pair(const Instance& in, const IncrementConfig& cfg, std::size_t i,
                                std::size_t j) {
  const std::size_t d = in.text.cols();
  std::vector<double> gap(d);
  for (std::size_t k = 0; k < d; ++k) gap[k] = cfg.eta * (in.video(j, k) - in.text(i, k));
  const std::vector<double> q = matvec(in.params.w_q, gap);
  const Matrix& tokens = cfg.context_side == Side::video ? in.video_tokens : in.text_tokens;
  const std::size_t item = cfg.context_side == Side::video ? j : i;
  std::vector<double> scores(in.l);
  double top = -1e300;
  for (std::size_t t = 0; t < in.l; ++t) {
    const std::vector<double> key = matvec(in.params.w_k, tokens.row_vector(item * in.l + t));
    scores[t] = dot(q, key) / std::sqrt(static_cast<double>(d));
    top = std::max(top, scores[t]);
  }
  double z = 0.0;
  for (double& s : scores) z += (s = std::exp(s - top));
  std::vector<double> mixed(d, 0.0);
  for (std::size_t t = 0; t < in.l; ++t) {
    const std::vector<double> value = matvec(in.params.w_v, tokens.row_vector(item * in.l + t));
    for (std::size_t k = 0; k < d; ++k) mixed[k] += scores[t] / z * value[k];
  }
  return matvec(in.params.w_o, mixed);
}

IncrementTensor run(const Instance& in, const IncrementConfig& cfg) {
  const Matrix& ctx = cfg.context_side == Side::video ? in.video_tokens : in.text_tokens;
  return psi_forward(in.text, in.video, ctx, in.l, cfg, in.params);
}

}  // namespace

TEST_CASE("initialization") {
  RngStream rng(1);
  const PsiParams p = PsiParams::initialize(32, rng);
  CHECK(p.w_o == Matrix(32, 32));
  double sq = 0.0;
  for (double v : p.w_q.values()) sq += v * v;
  CHECK(std::sqrt(sq / p.w_q.size()) == doctest::Approx(1.0 / std::sqrt(32.0)).epsilon(0.05));
  CHECK(p.dim() == 32);
}

TEST_CASE("zero output projection gives zero increments") {
  Instance in = make_instance(2, 5, 3, 6);
  in.params.w_o = Matrix(6, 6);
  const IncrementTensor delta = run(in, {});
  CHECK(delta.matrix() == Matrix(25, 6));
  for (double n : delta.norms()) CHECK(n == 0.0);
  CHECK(pairwise_similarity(in.text, in.video, delta, Side::text, 0.01).s ==
        pairwise_similarity(in.text, in.video, 0.01).s);
}

TEST_CASE("a single context token ignores the query") {
  const Instance in = make_instance(3, 4, 1, 5);
  const IncrementTensor delta = run(in, {});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const std::vector<double> expect =
          matvec(in.params.w_o, matvec(in.params.w_v, in.video_tokens.row_vector(j)));
      for (std::size_t k = 0; k < 5; ++k) CHECK(delta.pair(i, j)[k] == doctest::Approx(expect[k]).epsilon(1e-13));
    }
  }
}

TEST_CASE("every pair matches a scalar attention oracle") {
  const Instance in = make_instance(4, 3, 4, 8);
  for (int eta : {+1, -1}) {
    for (Side ctx : {Side::video, Side::text}) {
      const IncrementConfig cfg{eta, ctx, Side::text};
      const IncrementTensor delta = run(in, cfg);
      CHECK(delta.batch() == 3);
      CHECK(delta.matrix().rows() == 9);
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
          const std::vector<double> expect = oracle_pair(in, cfg, i, j);
          for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(delta.pair(i, j)[k] - expect[k]) < 1e-12);
          CHECK(delta.norm(i, j) == doctest::Approx(l2_norm(expect)).epsilon(1e-12));
          CHECK(delta.norm(i, j) >= 0.0);
        }
      }
    }
  }
}

TEST_CASE("batch permutation permutes the increment blocks") {
  const std::size_t b = 5, l = 3, d = 6;
  const Instance in = make_instance(5, b, l, d);
  RngStream rng(55);
  const std::vector<std::size_t> perm = permutation(rng, b);
  Instance shuffled = in;
  std::vector<std::size_t> token_perm;
  for (std::size_t item : perm)
    for (std::size_t t = 0; t < l; ++t) token_perm.push_back(item * l + t);
  shuffled.text = gather_rows(in.text, perm);
  shuffled.video = gather_rows(in.video, perm);
  shuffled.text_tokens = gather_rows(in.text_tokens, token_perm);
  shuffled.video_tokens = gather_rows(in.video_tokens, token_perm);
  for (Side ctx : {Side::video, Side::text}) {
    const IncrementConfig cfg{1, ctx, Side::text};
    const IncrementTensor base = run(in, cfg);
    const IncrementTensor moved = run(shuffled, cfg);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < d; ++k)
          CHECK(std::abs(moved.pair(i, j)[k] - base.pair(perm[i], perm[j])[k]) <= 1e-12);
  }
}

TEST_CASE("every psi parameter receives a gradient from L_info") {
  for (std::uint64_t seed : {6u, 7u, 8u}) {
    Instance in = make_instance(seed, 4, 3, 6);
    ag::Tape tape;
    const PsiVars psi = attach(tape, in.params);
    ag::Var t = tape.constant(in.text), v = tape.constant(in.video);
    ag::Var delta = psi_forward(t, v, tape.constant(in.video_tokens), in.l, {}, psi);
    ag::Var loss = infonce_symmetric_on_tape(similarity_on_tape(t, v, delta, Side::text), 0.1);
    const ag::Gradients g = tape.backward(loss);
    for (ag::Var w : {psi.w_q, psi.w_k, psi.w_v, psi.w_o}) CHECK(max_abs(g[w]) > 0.0);
  }
}

TEST_CASE("zero W_o still passes a gradient to W_o only") {
  Instance in = make_instance(9, 4, 3, 6);
  in.params.w_o = Matrix(6, 6);
  ag::Tape tape;
  const PsiVars psi = attach(tape, in.params);
  ag::Var t = tape.constant(in.text), v = tape.constant(in.video);
  ag::Var delta = psi_forward(t, v, tape.constant(in.video_tokens), in.l, {}, psi);
  ag::Var loss = infonce_symmetric_on_tape(similarity_on_tape(t, v, delta, Side::text), 0.1);
  const ag::Gradients g = tape.backward(loss);
  CHECK(max_abs(g[psi.w_o]) > 0.0);
  CHECK(max_abs(g[psi.w_q]) == 0.0);
  CHECK(max_abs(g[psi.w_v]) == 0.0);
}

TEST_CASE("apply_increments") {
  const Instance in = make_instance(10, 3, 2, 4);
  const PerturbedBatch same = apply_increments(in.text, in.video, IncrementTensor::zeros(3, 4), {});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(same.anchors(i * 3 + j, k) == in.text(i, k));
        CHECK(same.candidates(i * 3 + j, k) == in.video(j, k));
      }

  Matrix gap(9, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) gap(i * 3 + j, k) = in.video(j, k) - in.text(i, k);
  const PerturbedBatch closed = apply_increments(in.text, in.video, IncrementTensor(3, gap), {});
  CHECK(max_abs_diff(closed.anchors, closed.candidates) < 1e-15);

  const IncrementTensor delta = run(in, {});
  for (Side side : {Side::text, Side::video}) {
    const PerturbedBatch out = apply_increments(in.text, in.video, delta, {1, Side::video, side});
    const SimilarityMatrix sim = pairwise_similarity(in.text, in.video, delta, side, 0.01);
    for (std::size_t p = 0; p < 9; ++p)
      CHECK(cosine(out.anchors.row_span(p), out.candidates.row_span(p)) ==
            doctest::Approx(sim.s(p / 3, p % 3)).epsilon(1e-14));
  }
}

TEST_CASE("psi rejects inconsistent shapes") {
  const Instance in = make_instance(11, 3, 2, 4);
  CHECK_THROWS_AS(psi_forward(in.text, in.video, in.video_tokens, 3, {}, in.params), ShapeError);
  CHECK_THROWS_AS(psi_forward(in.text, in.video, in.video_tokens, 0, {}, in.params), ShapeError);
  IncrementConfig bad;
  bad.eta = 0;
  CHECK_THROWS_AS(psi_forward(in.text, in.video, in.video_tokens, 2, bad, in.params), DomainError);
  CHECK_THROWS_AS(IncrementTensor(3, Matrix(8, 4)), ShapeError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const Instance in = make_instance(12, 2, 2, 7);
  std::stringstream buf;
  write_checkpoint(buf, in.params);
  const PsiParams back = read_checkpoint(buf);
  CHECK(back.w_q == in.params.w_q);
  CHECK(back.w_k == in.params.w_k);
  CHECK(back.w_v == in.params.w_v);
  CHECK(back.w_o == in.params.w_o);

  test::TempDir dir("ckpt");
  save_checkpoint(dir.str("psi.ckpt"), in.params);
  CHECK(load_checkpoint(dir.str("psi.ckpt")).w_o == in.params.w_o);

  std::stringstream garbage("{\"D\": 7, \"version\": 99}\n");
  CHECK_THROWS(read_checkpoint(garbage));
}
