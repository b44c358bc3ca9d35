#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "gare/contrastive.hpp"
#include "gare/trustregion.hpp"
#include "helpers.hpp"

using namespace gare;

namespace {

TrustRegionProblem make_problem(RngStream& rng, std::size_t b, std::size_t d, double tau,
                                Side side = Side::text) {
  TrustRegionProblem p;
  p.text = gaussian_sample(rng, b, d, 0.0, 1.0);
  p.video = gaussian_sample(rng, b, d, 0.0, 1.0);
  p.tau = tau;
  p.side = side;
  return p;
}

IncrementTensor random_increments(RngStream& rng, std::size_t b, std::size_t d, double scale) {
  return IncrementTensor(b, gaussian_sample(rng, b * b, d, 0.0, scale));
}

std::vector<double> random_in_ball(RngStream& rng, std::size_t d, double eps) {
  std::vector<double> x(d);
  for (double& v : x) v = rng.gaussian();
  const double n = l2_norm(x);
  const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
  for (double& v : x) v *= r / n;
  return x;
}

}  // namespace

TEST_CASE("step_size_alpha closed-form cases") {
  const double eps = 0.37;
  const std::vector<double> zero(3, 0.0), g{0.0, 1.0, 0.0};
  CHECK(std::abs(step_size_alpha(zero, g, eps) - eps) <= 1e-12);

  const std::vector<double> on_boundary{eps, 0.0, 0.0};
  CHECK(std::abs(step_size_alpha(on_boundary, g, eps)) <= 1e-12);

  const std::vector<double> colinear{1.0, 0.0, 0.0};
  CHECK(std::abs(step_size_alpha(on_boundary, colinear, eps) - 2 * eps) <= 1e-12);

  const std::vector<double> outside{1.0, 0.0, 0.0};
  CHECK_THROWS_AS(step_size_alpha(outside, g, eps), DomainError);
}

TEST_CASE("alpha keeps any feasible increment on the ball") {
  RngStream rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const double eps = 0.01 + rng.uniform();
    const std::vector<double> delta = random_in_ball(rng, 6, eps);
    std::vector<double> g = random_in_ball(rng, 6, 1.0);
    const double n = l2_norm(g);
    for (double& v : g) v /= n;
    const double along = dot(delta, g);
    CHECK(along * along - dot(delta, delta) + eps * eps >= -1e-12);
    const double alpha = step_size_alpha(delta, g, eps);
    CHECK(alpha >= 0.0);
    std::vector<double> moved(6);
    for (std::size_t k = 0; k < 6; ++k) moved[k] = delta[k] - alpha * g[k];
    CHECK(l2_norm(moved) == doctest::Approx(eps).epsilon(1e-9));
  }
}

TEST_CASE("linearized loss") {
  RngStream rng(3);
  const TrustRegionProblem problem = make_problem(rng, 5, 6, 0.1);
  const IncrementTensor d0 = random_increments(rng, 5, 6, 0.1);
  CHECK(linearized_loss(problem, d0, d0) == coupled_loss(problem, d0));

  const IncrementTensor d1 = random_increments(rng, 5, 6, 0.1);
  const IncrementTensor d2 = random_increments(rng, 5, 6, 0.1);
  const IncrementTensor mid(5, scale(add(d1.matrix(), d2.matrix()), 0.5));
  CHECK(std::abs(linearized_loss(problem, d0, mid) -
                 0.5 * (linearized_loss(problem, d0, d1) + linearized_loss(problem, d0, d2))) <= 1e-10);
}

TEST_CASE("linear model error vanishes faster than the displacement") {
  RngStream rng(4);
  for (Side side : {Side::text, Side::video}) {
    const TrustRegionProblem problem = make_problem(rng, 4, 8, 0.2, side);
    const IncrementTensor d0 = random_increments(rng, 4, 8, 0.1);
    const Matrix g = coupled_gradients(problem, d0);
    double previous = 1e300;
    for (double h : {1e-2, 1e-3, 1e-4}) {
      const IncrementTensor moved(4, add(d0.matrix(), scale(g, -h)));
      const double ratio =
          std::abs(coupled_loss(problem, moved) - linearized_loss(problem, d0, moved)) / h;
      CHECK(ratio < previous);
      previous = ratio;
    }
  }
}

TEST_CASE("coupled gradients match finite differences") {
  RngStream rng(5);
  for (Side side : {Side::text, Side::video}) {
    const TrustRegionProblem problem = make_problem(rng, 3, 5, 0.3, side);
    const IncrementTensor d0 = random_increments(rng, 3, 5, 0.2);
    const Matrix g = coupled_gradients(problem, d0);
    Matrix fd(g.rows(), g.cols());
    const double h = 1e-6;
    for (std::size_t k = 0; k < g.size(); ++k) {
      Matrix up = d0.matrix(), down = d0.matrix();
      up[k] += h;
      down[k] -= h;
      fd[k] = (coupled_loss(problem, IncrementTensor(3, up)) -
               coupled_loss(problem, IncrementTensor(3, down))) / (2 * h);
    }
    CHECK(relative_error(g.values(), fd.values()) < 1e-7);
  }
}

TEST_CASE("noniterative step sits on the boundary and beats ball samples") {
  RngStream rng(6);
  const TrustRegionProblem problem = make_problem(rng, 4, 6, 0.01);
  const double eps = default_epsilon(problem);
  const IncrementTensor step = noniterative_step(problem, eps);
  const Matrix g = coupled_gradients(problem, IncrementTensor::zeros(4, 6));
  std::size_t violations = 0;
  for (std::size_t p = 0; p < 16; ++p) {
    if (l2_norm(g.row_span(p)) == 0.0) continue;
    CHECK(step.norms()[p] == doctest::Approx(eps).epsilon(1e-12));
    const double best = dot(g.row_span(p), step.matrix().row_span(p));
    for (int s = 0; s < 1000; ++s) {
      if (dot(g.row_span(p), random_in_ball(rng, 6, eps)) < best) ++violations;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("a stationary pair takes no step") {
  RngStream rng(7);
  const TrustRegionProblem problem = make_problem(rng, 1, 4, 0.01);
  const IncrementTensor step = noniterative_step(problem, 0.1);
  CHECK(step.matrix() == Matrix(1, 4));
  const TrustRegionState s = iterate_coupled(problem, start_state(problem, IncrementTensor::zeros(1, 4), 0.1), 3);
  CHECK(s.delta.matrix() == Matrix(1, 4));
}

TEST_CASE("iterate_coupled basics") {
  RngStream rng(8);
  const TrustRegionProblem problem = make_problem(rng, 4, 5, 0.05);
  const double eps = default_epsilon(problem);
  const TrustRegionState start = start_state(problem, IncrementTensor::zeros(4, 5), eps);
  REQUIRE(start.trajectory.size() == 1);
  CHECK(start.trajectory[0].true_loss == start.trajectory[0].linear_loss);

  const TrustRegionState none = iterate_coupled(problem, start, 0);
  CHECK(none.delta.matrix() == start.delta.matrix());
  CHECK(none.iteration == 0);
  CHECK(none.trajectory.size() == 1);

  const TrustRegionState one = iterate_coupled(problem, start, 1);
  CHECK(one.delta.matrix() == noniterative_step(problem, eps).matrix());
  CHECK(one.trajectory.size() == 2);

  CHECK_THROWS_AS(start_state(problem, IncrementTensor::zeros(4, 5), 0.0), DomainError);
  CHECK_THROWS_AS(start_state(problem, IncrementTensor::zeros(3, 5), 0.1), ShapeError);
}

TEST_CASE("iterates stay feasible and never raise the linear model") {
  RngStream rng(9);
  for (int run = 0; run < 200; ++run) {
    const Side side = run % 2 ? Side::video : Side::text;
    const TrustRegionProblem problem = make_problem(rng, 2 + rng.below(5), 3 + rng.below(6), 0.01, side);
    const double eps = default_epsilon(problem);
    TrustRegionState state = start_state(problem, IncrementTensor::zeros(problem.batch(), problem.dim()), eps);
    for (int step = 0; step < 5; ++step) {
      const IncrementTensor before = state.delta;
      state = iterate_coupled(problem, std::move(state), 1);
      for (double n : state.delta.norms()) CHECK(n <= eps + 1e-9);
      CHECK(linearized_loss(problem, before, state.delta) <=
            linearized_loss(problem, before, before) + 1e-12);
    }
  }
}

TEST_CASE("default epsilon follows the injection side") {
  TrustRegionProblem p;
  p.text = Matrix::from_rows({{3, 4}, {0, 2}});
  p.video = Matrix::from_rows({{1, 0}, {0, 1}});
  CHECK(default_epsilon(p) == doctest::Approx(0.05 * 3.5));
  p.side = Side::video;
  CHECK(default_epsilon(p) == doctest::Approx(0.05));
}

TEST_CASE("trajectory csv") {
  RngStream rng(10);
  const TrustRegionProblem problem = make_problem(rng, 3, 4, 0.1);
  const TrustRegionState s =
      iterate_coupled(problem, start_state(problem, IncrementTensor::zeros(3, 4), 0.1), 2);
  std::ostringstream out;
  write_trajectory_csv(out, s.trajectory);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,true_loss,linear_loss,max_delta_norm,mean_delta_norm");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
}
