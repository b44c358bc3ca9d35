#include "gare/regularizers.hpp"

#include <iostream>
#include <optional>

#include "gare/contrastive.hpp"

namespace gare {

namespace {

void check_layout(ag::Var delta, std::size_t batch, const char* who) {
  if (delta.rows() != batch * batch) {
    throw ShapeError(std::string(who) + ": increments must have B*B rows");
  }
}

ag::Var zero_scalar(ag::Var like) { return like.tape->constant(Matrix(1, 1, 0.0)); }

}  // namespace

ag::Var variance_loss(ag::Var delta, std::size_t batch, double lambda,
                      VarianceEstimator estimator) {
  check_layout(delta, batch, "variance_loss");
  if (!(lambda > 0.0)) throw DomainError("variance_loss: lambda must be positive");
  const std::size_t ddof = estimator == VarianceEstimator::sample ? 1 : 0;
  if (batch <= ddof) return zero_scalar(delta);
  ag::Var norms = ag::reshape(ag::l2_norm_rows(delta), batch, batch);
  ag::Var spread = ag::mean(ag::variance(norms, ddof));
  return ag::clamp_min(ag::negate(spread), -lambda);
}

ag::Var variance_loss_lse(ag::Var delta, std::size_t batch) {
  check_layout(delta, batch, "variance_loss_lse");
  ag::Tape& tape = *delta.tape;
  const double inv_b = 1.0 / static_cast<double>(batch);
  Matrix centering = Matrix::identity(batch);
  for (auto& v : centering.values()) v -= inv_b;
  ag::Var norms = ag::reshape(ag::l2_norm_rows(delta), batch, batch);
  ag::Var centered = ag::matmul(norms, tape.constant(std::move(centering)));
  ag::Var kernel = ag::exp(ag::negate(ag::square(centered)));
  ag::Var row_mean = ag::matmul(kernel, tape.constant(Matrix(batch, 1, inv_b)));
  return ag::mean(ag::log(ag::add_scalar(row_mean, 1.0)));
}

ag::Var direction_loss(ag::Var delta, std::size_t batch, double sigma) {
  check_layout(delta, batch, "direction_loss");
  ag::Tape& tape = *delta.tape;
  const Matrix values = delta.value();  // copy: recording below may reallocate the tape
  std::optional<ag::Var> total;
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < batch; ++j) {
      if (l2_norm(values.row_span(i * batch + j)) > kNormFloor) rows.push_back(i * batch + j);
    }
    const std::size_t n = rows.size();
    if (n < 2) continue;

    ag::Var block = ag::gather_rows(delta, std::move(rows));
    ag::Var norms = ag::l2_norm_rows(block);
    ag::Var gram = ag::matmul(block, ag::transpose(block));
    ag::Var inv_outer = ag::exp(ag::negate(ag::log(ag::matmul(norms, ag::transpose(norms)))));
    ag::Var cosines = ag::mul(gram, inv_outer);
    ag::Var kernel = ag::exp(ag::add_scalar(ag::scalar_mul(cosines, sigma), -sigma));

    Matrix off_diagonal(n, n, 1.0);
    for (std::size_t k = 0; k < n; ++k) off_diagonal(k, k) = 0.0;
    ag::Var masked = ag::mul(kernel, tape.constant(std::move(off_diagonal)));
    const double nn = static_cast<double>(n);
    ag::Var term = ag::log(ag::scalar_mul(ag::mean(masked), nn / (nn - 1.0)));
    total = total ? ag::add(*total, term) : term;
  }
  if (!total) return zero_scalar(delta);
  return ag::scalar_mul(*total, 1.0 / static_cast<double>(batch));
}

KlResult kl_ib_loss(ag::Var delta, std::size_t batch, Side anchor) {
  check_layout(delta, batch, "kl_ib_loss");
  if (batch < 2) throw DomainError("kl_ib_loss: needs at least two samples per anchor");
  const std::size_t d = delta.cols();
  std::vector<std::size_t> groups(batch * batch);
  for (std::size_t p = 0; p < groups.size(); ++p) {
    groups[p] = anchor == Side::video ? p % batch : p / batch;
  }
  ag::Var mu = ag::segment_mean(delta, groups, batch);
  ag::Var centered = ag::sub(delta, ag::gather_rows(mu, groups));
  ag::Var var = ag::segment_mean(ag::square(centered), groups, batch);

  KlResult out;
  for (double v : var.value().values())
    if (!(v > kKlVarianceFloor)) ++out.floored;
  ag::Var floored = ag::clamp_min(var, kKlVarianceFloor);

  ag::Var term = ag::add_scalar(ag::sub(ag::add(ag::square(mu), floored), ag::log(floored)), -1.0);
  out.loss = ag::scalar_mul(ag::mean(term), 0.5 * static_cast<double>(d));
  return out;
}

// ---- plain evaluation ------------------------------------------------------

double variance_loss(const IncrementTensor& delta, double lambda, VarianceEstimator estimator) {
  ag::Tape tape;
  return variance_loss(tape.constant(delta.matrix()), delta.batch(), lambda, estimator).scalar();
}

double variance_loss_lse(const IncrementTensor& delta) {
  ag::Tape tape;
  return variance_loss_lse(tape.constant(delta.matrix()), delta.batch()).scalar();
}

double direction_loss(const IncrementTensor& delta, double sigma) {
  ag::Tape tape;
  return direction_loss(tape.constant(delta.matrix()), delta.batch(), sigma).scalar();
}

double kl_ib_loss(const IncrementTensor& delta, Side anchor) {
  ag::Tape tape;
  const KlResult r = kl_ib_loss(tape.constant(delta.matrix()), delta.batch(), anchor);
  if (r.floored > 0) {
    std::clog << "kl_ib_loss: floored " << r.floored << " per-dimension variances at "
              << kKlVarianceFloor << '\n';
  }
  return r.loss.scalar();
}

}  // namespace gare
