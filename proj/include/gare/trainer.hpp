// Training loop for psi over frozen synthetic embeddings: total loss assembly,
// Adam updates and the baseline-vs-gare experiment runner.

#ifndef GARE_TRAINER_HPP
#define GARE_TRAINER_HPP

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gare/autograd.hpp"
#include "gare/increments.hpp"
#include "gare/probes.hpp"
#include "gare/regularizers.hpp"
#include "gare/synthdata.hpp"

namespace gare {

enum class TrainMode { baseline, gare };

struct TrainConfig {
  double tau = 0.01;
  RegularizerConfig reg;
  IncrementConfig inc;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::gare;

  /// Throws ConfigError naming the offending config-file key.
  void validate() const;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of every parameter in place. Moments are
/// created on the first call.
void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, double lr, double beta1, double beta2, double eps_adam);

struct LossBreakdown {
  double l_info = 0.0;
  double l_ib = 0.0;
  double l_eps = 0.0;
  double l_dir = 0.0;
  double total = 0.0;
  /// KL variances raised to the floor in this evaluation.
  std::size_t kl_floored = 0;
};

/// Loss terms recorded on a tape. In baseline mode there are no increments
/// and the regularizer terms are constant zeros.
struct LossGraph {
  ag::Var l_info, l_ib, l_eps, l_dir, total;
  std::optional<ag::Var> delta;
  std::size_t kl_floored = 0;

  LossBreakdown values() const;
};

/// psi_forward -> injection -> cosine similarities -> symmetric InfoNCE, with
/// the regularizers on the same increments. `psi` may be null in baseline mode.
LossGraph total_loss(ag::Tape& tape, const PairedBatch& batch, const PsiVars* psi,
                     const TrainConfig& cfg);

/// Increments for every pair of `batch` (zeros in baseline mode).
IncrementTensor predict_increments(const PairedBatch& batch, const PsiParams& params,
                                   const TrainConfig& cfg);

/// Similarities of every pair of `batch` with increments active in gare mode.
SimilarityMatrix evaluate_similarity(const PairedBatch& batch, const PsiParams& params,
                                     const TrainConfig& cfg);

/// Raised when a loss term or gradient stops being finite.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(std::size_t step, std::string term, double max_abs_grad);
  std::size_t step() const noexcept { return step_; }
  const std::string& term() const noexcept { return term_; }
  double max_abs_grad() const noexcept { return max_abs_grad_; }

 private:
  std::size_t step_;
  std::string term_;
  double max_abs_grad_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before training
  RetrievalMetrics metrics;
  AlignmentUniformity hypersphere;
  GeometryReport geometry;
};

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  LossBreakdown loss;
};

struct RunRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  /// Mean over the steps of the last epoch (one non-updating pass over the
  /// training batches when epochs = 0).
  LossBreakdown final_loss;
  PsiParams params;
  nlohmann::json manifest;
  double wall_seconds = 0.0;
};

struct RunOptions {
  ProbeConfig probes;
  /// Output directory; nothing is written when empty.
  std::string out_dir;
  /// Progress and KL-floor notes; silent when null.
  std::ostream* log = nullptr;
};

/// Training batches of one epoch: a seeded shuffle of the train split cut into
/// full batches (the remainder is dropped unless it is the only batch).
std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& train,
                                                    std::size_t batch_size, RngStream& rng);

/// Trains and evaluates; writes manifest.json, loss.csv, metrics.csv,
/// hypersphere.csv, aggregates.csv, pairs.csv, psi.ckpt and timing.json when
/// options.out_dir is set. Everything except timing.json is a deterministic
/// function of (dataset, cfg, probes).
RunRecord run_experiment(const Dataset& dataset, const TrainConfig& cfg,
                         const RunOptions& options = {});

std::string mode_name(TrainMode mode);

}  // namespace gare

#endif  // GARE_TRAINER_HPP
