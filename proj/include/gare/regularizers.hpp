// Regularizers on the increment tensor. Anchors are text items i (rows of the
// B x B pair grid) unless stated otherwise.
//
//   variance_loss      max(-mean_i Var_j eps_ij, -lambda)
//   variance_loss_lse  mean_i log(1 + mean_j exp(-(eps_ij - mean_j eps_ij)^2))
//   direction_loss     mean_i log mean_{j != k} exp(-sigma (1 - <z_ij, z_ik>))
//   kl_ib_loss         mean over anchors of KL(N(mu, diag s^2) || N(0, I))
//
// Each is recorded on a tape; the Matrix overloads evaluate on a private tape.

#ifndef GARE_REGULARIZERS_HPP
#define GARE_REGULARIZERS_HPP

#include <cstddef>

#include "gare/autograd.hpp"
#include "gare/increment_tensor.hpp"

namespace gare {

enum class VarianceEstimator { population, sample };
enum class VarianceVariant { clamp, log_sum_exp };

struct RegularizerConfig {
  double lambda = 0.5;
  double sigma = 2.0;
  double w_ib = 1.0;
  double w_eps = 1.0;
  double w_dir = 1.0;
  Side ib_anchor = Side::video;
  VarianceEstimator estimator = VarianceEstimator::population;
  VarianceVariant variance_variant = VarianceVariant::clamp;
};

/// Floor applied to per-dimension variances inside the KL term.
inline constexpr double kKlVarianceFloor = 1e-8;

ag::Var variance_loss(ag::Var delta, std::size_t batch, double lambda,
                      VarianceEstimator estimator = VarianceEstimator::population);
ag::Var variance_loss_lse(ag::Var delta, std::size_t batch);

/// Increments with norm at or below kNormFloor are left out of their anchor's
/// direction set; anchors with fewer than two directions contribute 0.
ag::Var direction_loss(ag::Var delta, std::size_t batch, double sigma);

struct KlResult {
  ag::Var loss;
  /// Number of (anchor, dimension) variances raised to kKlVarianceFloor.
  std::size_t floored = 0;
};
KlResult kl_ib_loss(ag::Var delta, std::size_t batch, Side anchor);

double variance_loss(const IncrementTensor& delta, double lambda,
                     VarianceEstimator estimator = VarianceEstimator::population);
double variance_loss_lse(const IncrementTensor& delta);
double direction_loss(const IncrementTensor& delta, double sigma);
/// Logs to std::clog when any variance is floored.
double kl_ib_loss(const IncrementTensor& delta, Side anchor);

}  // namespace gare

#endif  // GARE_REGULARIZERS_HPP
