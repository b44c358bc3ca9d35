#include <doctest.h>

#include <cmath>
#include <vector>

#include "gare/contrastive.hpp"
#include "helpers.hpp"

using namespace gare;

namespace {

// Plain-loop InfoNCE used as an independent oracle.
double oracle_anchor(const std::vector<double>& row, std::size_t pos, double tau) {
  double denom = 0.0;
  for (double s : row) denom += std::exp((s - row[pos]) / tau);
  return std::log(denom);
}

Matrix random_delta(RngStream& rng, std::size_t b, std::size_t d, double scale) {
  return gaussian_sample(rng, b * b, d, 0.0, scale);
}

double rel(const Matrix& a, const Matrix& b) { return relative_error(a.values(), b.values()); }

}  // namespace

TEST_CASE("pairwise_similarity examples") {
  const Matrix t = test::random_matrix(1, 4, 8);
  const Matrix v = test::random_matrix(2, 4, 8);
  const SimilarityMatrix plain = pairwise_similarity(t, v, 0.1);
  const SimilarityMatrix zero = pairwise_similarity(t, v, IncrementTensor::zeros(4, 8), Side::text, 0.1);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double c = cosine(t.row_span(i), v.row_span(j));
      CHECK(plain.s(i, j) == c);
      CHECK(zero.s(i, j) == c);
    }
  }

  // Delta_ij = v_j - t_i closes every gap.
  Matrix gap(16, 8);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 8; ++k) gap(i * 4 + j, k) = v(j, k) - t(i, k);
  const SimilarityMatrix closed = pairwise_similarity(t, v, IncrementTensor(4, gap), Side::text, 0.1);
  for (double s : closed.s.values()) CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("perturbed similarity matches a scalar oracle on both sides") {
  RngStream rng(3);
  const Matrix t = gaussian_sample(rng, 4, 8, 0.0, 1.0);
  const Matrix v = gaussian_sample(rng, 4, 8, 0.0, 1.0);
  const IncrementTensor delta(4, random_delta(rng, 4, 8, 0.5));
  for (Side side : {Side::text, Side::video}) {
    const SimilarityMatrix sim = pairwise_similarity(t, v, delta, side, 0.01);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        std::vector<double> a = t.row_vector(i), b = v.row_vector(j);
        auto inc = delta.pair(i, j);
        for (std::size_t k = 0; k < 8; ++k) (side == Side::text ? a : b)[k] += inc[k];
        CHECK(sim.s(i, j) == doctest::Approx(cosine(a, b)).epsilon(1e-14));
        CHECK(std::abs(sim.s(i, j)) <= 1.0);
      }
    }
  }
}

TEST_CASE("collapsed perturbed norm names the pair") {
  const Matrix t = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix v = Matrix::from_rows({{1, 1}, {1, -1}});
  Matrix d(4, 2);
  d(1, 0) = -1.0;  // t_0 + delta_01 = 0
  try {
    pairwise_similarity(t, v, IncrementTensor(2, d), Side::text, 0.1);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("(0, 1)") != std::string::npos);
  }
}

TEST_CASE("infonce_anchor examples") {
  CHECK(infonce_anchor(std::vector<double>(5, 0.3), 2, 0.01) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-14));
  CHECK(infonce_anchor(std::vector<double>{1.0, 0.0}, 0, 1.0) ==
        doctest::Approx(0.313261687518223).epsilon(1e-14));
  CHECK(infonce_anchor(std::vector<double>{1.0, 0.0, 0.0, 0.0}, 0, 0.01) < 1e-12);
  // Logits of +-100 must not overflow.
  const double worst = infonce_anchor(std::vector<double>{-1.0, 1.0}, 0, 0.01);
  CHECK(std::isfinite(worst));
  CHECK(worst == doctest::Approx(200.0));
}

TEST_CASE("infonce_symmetric examples") {
  Matrix sym = test::random_matrix(5, 4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < i; ++j) sym(i, j) = sym(j, i);
  const SimilarityMatrix s{sym, 0.5};
  CHECK(infonce_text_to_video(s) == doctest::Approx(infonce_video_to_text(s)).epsilon(1e-15));
  CHECK(infonce_symmetric(s) == doctest::Approx(infonce_text_to_video(s)).epsilon(1e-15));

  CHECK(infonce_symmetric(SimilarityMatrix{Matrix(1, 1, 0.4), 0.01}) == 0.0);

  RngStream rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = gaussian_sample(rng, 4, 4, 0.0, 0.4);
    const SimilarityMatrix sim{m, 0.2};
    double t2v = 0.0, v2t = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      t2v += oracle_anchor(m.row_vector(i), i, 0.2);
      v2t += oracle_anchor(m.transposed().row_vector(i), i, 0.2);
    }
    CHECK(std::abs(infonce_symmetric(sim) - 0.5 * (t2v / 4 + v2t / 4)) < 1e-12);
  }
}

TEST_CASE("uniform similarities give log B") {
  for (std::size_t b : {2u, 3u, 8u, 64u}) {
    const SimilarityMatrix s{Matrix(b, b, 0.25), 0.01};
    CHECK(std::abs(infonce_symmetric(s) - std::log(static_cast<double>(b))) <= 1e-12);
  }
}

TEST_CASE("softmax axes are normalized and strictly inside (0, 1)") {
  RngStream rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const SimilarityMatrix s{gaussian_sample(rng, 6, 6, 0.0, 0.3), 0.1};
    const ProbMatrix rows = probabilities(s, SoftmaxAxis::rows);
    const ProbMatrix cols = probabilities(s, SoftmaxAxis::columns);
    for (std::size_t i = 0; i < 6; ++i) {
      double rs = 0.0, cs = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        rs += rows.p(i, j);
        cs += cols.p(j, i);
        CHECK(rows.p(i, j) > 0.0);
        CHECK(rows.p(i, j) < 1.0);
      }
      CHECK(std::abs(rs - 1.0) <= 1e-12);
      CHECK(std::abs(cs - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax is shift invariant") {
  RngStream rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m = gaussian_sample(rng, 5, 5, 0.0, 0.3);
    const ProbMatrix before = probabilities({m, 0.05}, SoftmaxAxis::rows);
    const double c = rng.gaussian();
    for (std::size_t j = 0; j < 5; ++j) m(2, j) += c;
    const ProbMatrix after = probabilities({m, 0.05}, SoftmaxAxis::rows);
    CHECK(max_abs_diff(before.p, after.p) <= 1e-12);
  }
}

TEST_CASE("positive coefficient equals the aggregate negative weight") {
  RngStream rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbMatrix p = probabilities({gaussian_sample(rng, 7, 7, 0.0, 0.3), 0.01}, SoftmaxAxis::rows);
    for (std::size_t i = 0; i < 7; ++i) {
      double negatives = 0.0;
      for (std::size_t j = 0; j < 7; ++j)
        if (j != i) negatives += p.p(i, j);
      CHECK(std::abs(std::abs(p.p(i, i) - 1.0) - negatives) <= 1e-12);
    }
  }
}

TEST_CASE("raising the positive similarity lowers the anchor loss") {
  RngStream rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> row = gaussian_sample(rng, 1, 6, 0.0, 0.3).row_vector(0);
    const std::size_t pos = rng.below(6);
    const double before = infonce_anchor(row, pos, 0.1);
    row[pos] += 0.01 + rng.uniform();
    CHECK(infonce_anchor(row, pos, 0.1) < before);
  }
}

TEST_CASE("grad_anchor_analytic examples") {
  const Matrix t = test::random_matrix(14, 1, 5);
  const Matrix v = test::random_matrix(15, 1, 5);
  const std::vector<double> one{1.0};
  for (double g : grad_anchor_analytic(t.row_span(0), v, one, one, 0.01)) CHECK(g == 0.0);

  // Every candidate equals the anchor: each bracket vanishes.
  Matrix same(3, 5);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 5; ++k) same(j, k) = t(0, k);
  const std::vector<double> p{0.2, 0.5, 0.3}, y{1.0, 0.0, 0.0};
  for (double g : grad_anchor_analytic(t.row_span(0), same, p, y, 0.01)) CHECK(std::abs(g) < 1e-14);
}

TEST_CASE("grad_anchor_analytic matches finite differences of the anchor loss") {
  RngStream rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = gaussian_sample(rng, 1, 8, 0.0, 1.0);
    const Matrix v = gaussian_sample(rng, 4, 8, 0.0, 1.0);
    const double tau = 0.2 + 0.8 * rng.uniform();
    const std::size_t pos = rng.below(4);
    auto loss = [&](const std::vector<double>& anchor) {
      std::vector<double> row(4);
      for (std::size_t j = 0; j < 4; ++j) row[j] = cosine(anchor, v.row_span(j));
      return infonce_anchor(row, pos, tau);
    };
    std::vector<double> row(4), y(4, 0.0);
    y[pos] = 1.0;
    for (std::size_t j = 0; j < 4; ++j) row[j] = cosine(t.row_span(0), v.row_span(j));
    const ProbMatrix p = probabilities({Matrix::row(row), tau}, SoftmaxAxis::rows);
    const std::vector<double> g = grad_anchor_analytic(t.row_span(0), v, p.p.row_span(0), y, tau);
    std::vector<double> fd(8);
    const double h = 1e-5;
    for (std::size_t k = 0; k < 8; ++k) {
      std::vector<double> up = t.row_vector(0), down = t.row_vector(0);
      up[k] += h;
      down[k] -= h;
      fd[k] = (loss(up) - loss(down)) / (2 * h);
    }
    CHECK(relative_error(g, fd) < 1e-5);
  }
}

TEST_CASE("grad_perturbed_anchor examples and tangency") {
  RngStream rng(18);
  const Matrix a = gaussian_sample(rng, 2, 6, 0.0, 1.0);
  for (double g : grad_perturbed_anchor(a.row_span(0), a.row_span(1), 0.0, 0.0, 0.01)) CHECK(g == 0.0);
  for (double g : grad_perturbed_anchor(a.row_span(0), a.row_span(1), 1.0, 1.0, 0.01)) CHECK(g == 0.0);

  for (int trial = 0; trial < 200; ++trial) {
    const Matrix pair = gaussian_sample(rng, 2, 16, 0.0, 1.0 + 5.0 * rng.uniform());
    const std::vector<double> g =
        grad_perturbed_anchor(pair.row_span(0), pair.row_span(1), rng.uniform(), trial % 2, 0.01);
    const double c = dot(g, pair.row_span(0)) / (l2_norm(g) * l2_norm(pair.row_span(0)));
    CHECK(std::abs(c) < 1e-9);
  }
}

TEST_CASE("closed-form gradients agree with autograd") {
  RngStream rng(20);
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t b = 1 + rng.below(8), d = 2 + rng.below(15);
    const Matrix t = gaussian_sample(rng, b, d, 0.0, 1.0);
    const Matrix v = gaussian_sample(rng, b, d, 0.0, 1.0);
    const IncrementTensor delta(b, random_delta(rng, b, d, 0.3));
    const double tau = trial % 3 == 0 ? 0.01 : 0.1 + rng.uniform();
    const GradientFlowReport r = check_gradient_flow(t, v, delta, tau);
    worst = std::max(worst, rel(r.anchor_grad_autograd, r.anchor_grad_analytic));
    // Per-pair gradients: compare each block against the closed form.
    const SimilarityMatrix s = pairwise_similarity(t, v, delta, Side::text, tau);
    const ProbMatrix p = probabilities(s, SoftmaxAxis::rows);
    Matrix analytic(b * b, d);
    std::vector<double> moved(d);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t k = 0; k < d; ++k) moved[k] = t(i, k) + delta.pair(i, j)[k];
        const auto g = grad_perturbed_anchor(moved, v.row_span(j), p.p(i, j), p.label(i, j), tau);
        for (std::size_t k = 0; k < d; ++k) analytic(i * b + j, k) = g[k];
      }
    }
    worst = std::max(worst, rel(r.increment_grad_autograd, analytic));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("gradient flow report") {
  RngStream rng(22);
  const Matrix t = gaussian_sample(rng, 5, 7, 0.0, 1.0);
  const Matrix v = gaussian_sample(rng, 5, 7, 0.0, 1.0);

  // Zero increments: the per-pair sum reduces to the plain anchor gradient.
  const GradientFlowReport zero = check_gradient_flow(t, v, IncrementTensor::zeros(5, 7), 0.5);
  const ProbMatrix p = probabilities(pairwise_similarity(t, v, 0.5), SoftmaxAxis::rows);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> y(5, 0.0);
    y[i] = 1.0;
    const auto g = grad_anchor_analytic(t.row_span(i), v, p.p.row_span(i), y, 0.5);
    for (std::size_t k = 0; k < 7; ++k)
      CHECK(std::abs(zero.anchor_grad_analytic(i, k) - g[k]) < 1e-12);
  }

  const IncrementTensor delta(5, random_delta(rng, 5, 7, 0.4));
  const GradientFlowReport attached = check_gradient_flow(t, v, delta, 0.5, true);
  CHECK(attached.max_deviation() < 1e-10);
  const GradientFlowReport detached = check_gradient_flow(t, v, delta, 0.5, false);
  CHECK(detached.anchor_grad_autograd == attached.anchor_grad_autograd);
  CHECK(detached.increment_grad_autograd == Matrix(25, 7));
}

TEST_CASE("tape losses match the closed-form evaluations") {
  RngStream rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = gaussian_sample(rng, 6, 5, 0.0, 1.0);
    const Matrix v = gaussian_sample(rng, 6, 5, 0.0, 1.0);
    const IncrementTensor delta(6, random_delta(rng, 6, 5, 0.3));
    const Side side = trial % 2 ? Side::video : Side::text;
    ag::Tape tape;
    ag::Var sim = similarity_on_tape(tape.constant(t), tape.constant(v), tape.constant(delta.matrix()), side);
    const SimilarityMatrix ref = pairwise_similarity(t, v, delta, side, 0.01);
    CHECK(max_abs_diff(sim.value(), ref.s) < 1e-14);
    CHECK(infonce_symmetric_on_tape(sim, 0.01).scalar() == doctest::Approx(infonce_symmetric(ref)).epsilon(1e-12));
    CHECK(infonce_text_to_video_on_tape(sim, 0.01).scalar() ==
          doctest::Approx(infonce_text_to_video(ref)).epsilon(1e-12));
  }
}

TEST_CASE("pair layout") {
  CHECK(anchor_index(3) == std::vector<std::size_t>{0, 0, 0, 1, 1, 1, 2, 2, 2});
  CHECK(candidate_index(3) == std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0, 1, 2});
}
