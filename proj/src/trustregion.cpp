#include "gare/trustregion.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "gare/contrastive.hpp"

namespace gare {

namespace {

TrajectoryRow make_row(std::size_t step, double true_loss, double linear_loss,
                       const IncrementTensor& delta) {
  TrajectoryRow row{step, true_loss, linear_loss, 0.0, 0.0};
  for (double n : delta.norms()) {
    row.max_delta_norm = std::max(row.max_delta_norm, n);
    row.mean_delta_norm += n;
  }
  if (!delta.norms().empty()) row.mean_delta_norm /= static_cast<double>(delta.norms().size());
  return row;
}

void check_delta(const TrustRegionProblem& problem, const IncrementTensor& delta) {
  if (!problem.text.same_shape(problem.video)) throw ShapeError("trust region: text/video shapes differ");
  if (delta.batch() != problem.batch() || delta.dim() != problem.dim()) {
    throw ShapeError("trust region: increment tensor does not match the batch");
  }
}

}  // namespace

double default_epsilon(const TrustRegionProblem& problem, double relative) {
  const Matrix& rows = problem.side == Side::text ? problem.text : problem.video;
  double total = 0.0;
  for (std::size_t r = 0; r < rows.rows(); ++r) total += l2_norm(rows.row_span(r));
  return relative * total / static_cast<double>(rows.rows());
}

double coupled_loss(const TrustRegionProblem& problem, const IncrementTensor& delta) {
  check_delta(problem, delta);
  return infonce_symmetric(
      pairwise_similarity(problem.text, problem.video, delta, problem.side, problem.tau));
}

Matrix coupled_gradients(const TrustRegionProblem& problem, const IncrementTensor& delta) {
  check_delta(problem, delta);
  const std::size_t b = problem.batch();
  const std::size_t d = problem.dim();
  const SimilarityMatrix sim =
      pairwise_similarity(problem.text, problem.video, delta, problem.side, problem.tau);
  const ProbMatrix p_row = probabilities(sim, SoftmaxAxis::rows);
  const ProbMatrix p_col = probabilities(sim, SoftmaxAxis::columns);

  Matrix grads(b * b, d);
  std::vector<double> moved(d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      auto base = problem.side == Side::text ? problem.text.row_span(i) : problem.video.row_span(j);
      auto other = problem.side == Side::text ? problem.video.row_span(j) : problem.text.row_span(i);
      auto inc = delta.pair(i, j);
      for (std::size_t k = 0; k < d; ++k) moved[k] = base[k] + inc[k];
      const double p = 0.5 * (p_row.p(i, j) + p_col.p(i, j));
      const auto g = grad_perturbed_anchor(moved, other, p, p_row.label(i, j), problem.tau);
      auto out = grads.row_span(i * b + j);
      for (std::size_t k = 0; k < d; ++k) out[k] = g[k] / static_cast<double>(b);
    }
  }
  return grads;
}

double linearized_loss(const TrustRegionProblem& problem, const IncrementTensor& expansion_point,
                       const IncrementTensor& delta) {
  check_delta(problem, delta);
  const Matrix grads = coupled_gradients(problem, expansion_point);
  const Matrix& d0 = expansion_point.matrix();
  const Matrix& d1 = delta.matrix();
  double change = 0.0;
  for (std::size_t k = 0; k < grads.size(); ++k) change += grads[k] * (d1[k] - d0[k]);
  return coupled_loss(problem, expansion_point) + change;
}

IncrementTensor noniterative_step(const TrustRegionProblem& problem, double epsilon) {
  const std::size_t b = problem.batch();
  const Matrix grads = coupled_gradients(problem, IncrementTensor::zeros(b, problem.dim()));
  Matrix step(grads.rows(), grads.cols());
  for (std::size_t p = 0; p < grads.rows(); ++p) {
    const double n = l2_norm(grads.row_span(p));
    if (n == 0.0) continue;
    auto g = grads.row_span(p);
    auto out = step.row_span(p);
    for (std::size_t k = 0; k < g.size(); ++k) out[k] = -(epsilon * (g[k] / n));
  }
  return IncrementTensor(b, std::move(step));
}

double step_size_alpha(std::span<const double> delta, std::span<const double> unit_gradient,
                       double epsilon) {
  const double along = dot(delta, unit_gradient);
  const double disc = along * along - dot(delta, delta) + epsilon * epsilon;
  if (disc < -1e-12) {
    throw DomainError("step_size_alpha: negative discriminant " + format_double(disc) +
                      " (increment outside the trust region)");
  }
  return along + std::sqrt(std::max(disc, 0.0));
}

TrustRegionState start_state(const TrustRegionProblem& problem, IncrementTensor delta,
                             double epsilon) {
  if (!(epsilon > 0.0)) throw DomainError("trust region radius must be positive");
  const double loss = coupled_loss(problem, delta);
  TrustRegionState state;
  state.epsilon = epsilon;
  state.trajectory.push_back(make_row(0, loss, loss, delta));
  state.delta = std::move(delta);
  return state;
}

TrustRegionState iterate_coupled(const TrustRegionProblem& problem, TrustRegionState state,
                                 std::size_t steps) {
  const std::size_t b = problem.batch();
  for (std::size_t s = 0; s < steps; ++s) {
    const Matrix grads = coupled_gradients(problem, state.delta);
    const Matrix& current = state.delta.matrix();
    Matrix next = current;
    double linear_change = 0.0;
    for (std::size_t p = 0; p < grads.rows(); ++p) {
      auto g = grads.row_span(p);
      const double n = l2_norm(g);
      if (n == 0.0) continue;
      std::vector<double> unit(g.size());
      for (std::size_t k = 0; k < g.size(); ++k) unit[k] = g[k] / n;
      const double alpha = step_size_alpha(current.row_span(p), unit, state.epsilon);
      auto out = next.row_span(p);
      for (std::size_t k = 0; k < g.size(); ++k) out[k] = out[k] - alpha * unit[k];
      linear_change -= alpha * n;
    }
    const double base_loss = state.trajectory.empty() ? coupled_loss(problem, state.delta)
                                                      : state.trajectory.back().true_loss;
    state.delta = IncrementTensor(b, std::move(next));
    ++state.iteration;
    state.trajectory.push_back(make_row(state.iteration, coupled_loss(problem, state.delta),
                                        base_loss + linear_change, state.delta));
  }
  return state;
}

void write_trajectory_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows) {
  out << "step,true_loss,linear_loss,max_delta_norm,mean_delta_norm\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_double(r.true_loss) << ',' << format_double(r.linear_loss)
        << ',' << format_double(r.max_delta_norm) << ',' << format_double(r.mean_delta_norm)
        << '\n';
  }
}

}  // namespace gare
