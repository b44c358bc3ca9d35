// Trust-region view of the increments: the symmetric InfoNCE loss is
// linearized around a coupled state delta^(t), and each delta_ij moves along
// its own steepest-descent direction while staying inside ||delta_ij|| <= eps.
//
// Objective: L(delta) = infonce_symmetric(cos(t_i + delta_ij, v_j) / tau)
// (or v_j + delta_ij for video-side injection). Its per-pair gradient is the
// perturbed-anchor gradient with the row and column softmax averaged:
//   dL/ddelta_ij = grad_perturbed_anchor(t_d, v_j, (p_row + p_col) / 2, y, tau) / B.

#ifndef GARE_TRUSTREGION_HPP
#define GARE_TRUSTREGION_HPP

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "gare/increment_tensor.hpp"
#include "gare/tensorcore.hpp"

namespace gare {

struct TrustRegionProblem {
  Matrix text;
  Matrix video;
  double tau = 0.01;
  Side side = Side::text;

  std::size_t batch() const noexcept { return text.rows(); }
  std::size_t dim() const noexcept { return text.cols(); }
};

struct TrajectoryRow {
  std::size_t step = 0;
  double true_loss = 0.0;
  /// Linear model around the previous state evaluated at this state; equal to
  /// true_loss on the initial row.
  double linear_loss = 0.0;
  double max_delta_norm = 0.0;
  double mean_delta_norm = 0.0;
};

struct TrustRegionState {
  IncrementTensor delta;
  double epsilon = 0.0;
  std::size_t iteration = 0;
  std::vector<TrajectoryRow> trajectory;
};

/// 0.05 times the mean norm of the rows that receive the increments.
double default_epsilon(const TrustRegionProblem& problem, double relative = 0.05);

double coupled_loss(const TrustRegionProblem& problem, const IncrementTensor& delta);

/// dL/ddelta_ij for every pair, as a (B*B) x D matrix.
Matrix coupled_gradients(const TrustRegionProblem& problem, const IncrementTensor& delta);

/// L(delta0) + sum_ij <dL/ddelta_ij(delta0), delta_ij - delta0_ij>.
double linearized_loss(const TrustRegionProblem& problem, const IncrementTensor& expansion_point,
                       const IncrementTensor& delta);

/// One-shot minimizer of the linear model at delta = 0 on the eps-ball:
/// delta_ij = -eps * g_ij / ||g_ij||, zero for pairs with zero gradient.
IncrementTensor noniterative_step(const TrustRegionProblem& problem, double epsilon);

/// Largest alpha >= 0 with ||delta - alpha * g_hat|| <= eps:
///   alpha = <delta, g_hat> + sqrt(<delta, g_hat>^2 - ||delta||^2 + eps^2).
/// Discriminants down to -1e-12 are treated as zero; anything lower means
/// delta was infeasible and raises DomainError.
double step_size_alpha(std::span<const double> delta, std::span<const double> unit_gradient,
                       double epsilon);

/// Initial state; logs the step-0 trajectory row.
TrustRegionState start_state(const TrustRegionProblem& problem, IncrementTensor delta,
                             double epsilon);

/// Runs `steps` simultaneous updates: all gradients come from one snapshot of
/// the current state (softmax recomputed each step), then every pair moves by
/// its maximal feasible step. True and linearized losses are logged, never
/// asserted.
TrustRegionState iterate_coupled(const TrustRegionProblem& problem, TrustRegionState state,
                                 std::size_t steps);

/// CSV with header step,true_loss,linear_loss,max_delta_norm,mean_delta_norm.
void write_trajectory_csv(std::ostream& out, const std::vector<TrajectoryRow>& rows);

}  // namespace gare

#endif  // GARE_TRUSTREGION_HPP
