#include "gare/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "gare/config.hpp"
#include "gare/contrastive.hpp"
#include "gare/json_fields.hpp"

namespace gare {

namespace {

bool finite(double v) { return std::isfinite(v); }

ag::Var zero(ag::Tape& tape) { return tape.constant(Matrix(1, 1, 0.0)); }

const Matrix& context_tokens(const PairedBatch& batch, const IncrementConfig& inc) {
  return inc.context_side == Side::video ? batch.video_tokens : batch.text_tokens;
}

std::size_t context_length(const PairedBatch& batch, const IncrementConfig& inc) {
  return inc.context_side == Side::video ? batch.video_tokens_per_item
                                         : batch.text_tokens_per_item;
}

LossBreakdown& accumulate(LossBreakdown& acc, const LossBreakdown& x) {
  acc.l_info += x.l_info;
  acc.l_ib += x.l_ib;
  acc.l_eps += x.l_eps;
  acc.l_dir += x.l_dir;
  acc.total += x.total;
  acc.kl_floored += x.kl_floored;
  return acc;
}

LossBreakdown divided(LossBreakdown x, std::size_t n) {
  if (n == 0) return x;
  const double k = static_cast<double>(n);
  x.l_info /= k;
  x.l_ib /= k;
  x.l_eps /= k;
  x.l_dir /= k;
  x.total /= k;
  return x;
}

nlohmann::json number(double v) { return finite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json direction_json(const DirectionMetrics& m) {
  return {{"R@1", m.r1}, {"R@5", m.r5}, {"R@10", m.r10}, {"MdR", m.median_rank}, {"MnR", m.mean_rank}};
}

nlohmann::json loss_json(const LossBreakdown& l) {
  return {{"l_info", number(l.l_info)}, {"l_ib", number(l.l_ib)}, {"l_eps", number(l.l_eps)},
          {"l_dir", number(l.l_dir)},   {"total", number(l.total)}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

double max_abs_of(const std::vector<Matrix>& grads) {
  double worst = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) worst = std::max(worst, std::abs(v));
  return worst;
}

}  // namespace

std::string mode_name(TrainMode mode) { return mode == TrainMode::baseline ? "baseline" : "gare"; }

void TrainConfig::validate() const {
  auto positive = [](double v, const char* key) {
    if (!(finite(v) && v > 0.0)) throw ConfigError(key, "must be finite and positive");
  };
  positive(tau, "train.tau");
  positive(lr, "train.lr");
  positive(eps_adam, "train.eps_adam");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (batch_size < 2) throw ConfigError("train.batch_size", "must be at least 2");
  if (inc.eta != 1 && inc.eta != -1) throw ConfigError("train.eta", "must be +1 or -1");
  positive(reg.lambda, "regularizers.lambda");
  positive(reg.sigma, "regularizers.sigma");
  auto weight = [](double v, const char* key) {
    if (!(finite(v) && v >= 0.0)) throw ConfigError(key, "must be finite and non-negative");
  };
  weight(reg.w_ib, "regularizers.w_ib");
  weight(reg.w_eps, "regularizers.w_eps");
  weight(reg.w_dir, "regularizers.w_dir");
}

void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
               AdamState& state, double lr, double beta1, double beta2, double eps_adam) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count differs");
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(grads[k]) || !state.m[k].same_shape(grads[k])) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->values();
    auto g = grads[k].values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t e = 0; e < p.size(); ++e) {
      m[e] = beta1 * m[e] + (1.0 - beta1) * g[e];
      v[e] = beta2 * v[e] + (1.0 - beta2) * g[e] * g[e];
      const double m_hat = m[e] / c1;
      const double v_hat = v[e] / c2;
      p[e] -= lr * m_hat / (std::sqrt(v_hat) + eps_adam);
    }
  }
}

LossBreakdown LossGraph::values() const {
  return {l_info.scalar(), l_ib.scalar(), l_eps.scalar(), l_dir.scalar(), total.scalar(),
          kl_floored};
}

LossGraph total_loss(ag::Tape& tape, const PairedBatch& batch, const PsiVars* psi,
                     const TrainConfig& cfg) {
  const std::size_t b = batch.size();
  ag::Var text = tape.constant(batch.text);
  ag::Var video = tape.constant(batch.video);
  LossGraph g;
  if (cfg.mode == TrainMode::baseline) {
    g.l_info = infonce_symmetric_on_tape(similarity_on_tape(text, video, std::nullopt, Side::text),
                                         cfg.tau);
    g.l_ib = g.l_eps = g.l_dir = zero(tape);
    g.total = g.l_info;
    return g;
  }
  if (psi == nullptr) throw std::invalid_argument("total_loss: gare mode needs psi parameters");

  ag::Var ctx = tape.constant(context_tokens(batch, cfg.inc));
  ag::Var delta = psi_forward(text, video, ctx, context_length(batch, cfg.inc), cfg.inc, *psi);
  g.delta = delta;
  g.l_info = infonce_symmetric_on_tape(
      similarity_on_tape(text, video, delta, cfg.inc.injection_side), cfg.tau);

  const KlResult kl = kl_ib_loss(delta, b, cfg.reg.ib_anchor);
  g.l_ib = kl.loss;
  g.kl_floored = kl.floored;
  g.l_eps = cfg.reg.variance_variant == VarianceVariant::clamp
                ? variance_loss(delta, b, cfg.reg.lambda, cfg.reg.estimator)
                : variance_loss_lse(delta, b);
  g.l_dir = direction_loss(delta, b, cfg.reg.sigma);

  g.total = ag::add(ag::add(ag::add(g.l_info, ag::scalar_mul(g.l_ib, cfg.reg.w_ib)),
                            ag::scalar_mul(g.l_eps, cfg.reg.w_eps)),
                    ag::scalar_mul(g.l_dir, cfg.reg.w_dir));
  return g;
}

IncrementTensor predict_increments(const PairedBatch& batch, const PsiParams& params,
                                   const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::baseline) return IncrementTensor::zeros(batch.size(), batch.text.cols());
  return psi_forward(batch.text, batch.video, context_tokens(batch, cfg.inc),
                     context_length(batch, cfg.inc), cfg.inc, params);
}

SimilarityMatrix evaluate_similarity(const PairedBatch& batch, const PsiParams& params,
                                     const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::baseline) return pairwise_similarity(batch.text, batch.video, cfg.tau);
  return pairwise_similarity(batch.text, batch.video, predict_increments(batch, params, cfg),
                             cfg.inc.injection_side, cfg.tau);
}

TrainingDivergence::TrainingDivergence(std::size_t step, std::string term, double max_abs_grad)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + term +
                         " is not finite (max |grad| = " + format_double(max_abs_grad) + ")"),
      step_(step),
      term_(std::move(term)),
      max_abs_grad_(max_abs_grad) {}

std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& train,
                                                    std::size_t batch_size, RngStream& rng) {
  const std::vector<std::size_t> order = permutation(rng, train.size());
  std::vector<std::vector<std::size_t>> batches;
  if (train.size() < batch_size) {
    std::vector<std::size_t> all;
    for (std::size_t k : order) all.push_back(train[k]);
    if (!all.empty()) batches.push_back(std::move(all));
    return batches;
  }
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    std::vector<std::size_t> items;
    for (std::size_t k = start; k < start + batch_size; ++k) items.push_back(train[order[k]]);
    batches.push_back(std::move(items));
  }
  return batches;
}

namespace {

enum RunStream : std::uint64_t { kInit = 1, kShuffle = 2 };

EpochRecord evaluate_epoch(std::size_t epoch, const PairedBatch& test, const PsiParams& params,
                           const TrainConfig& cfg, const ProbeConfig& probes) {
  EpochRecord rec;
  rec.epoch = epoch;
  const IncrementTensor delta = predict_increments(test, params, cfg);
  const SimilarityMatrix sim =
      cfg.mode == TrainMode::baseline
          ? pairwise_similarity(test.text, test.video, cfg.tau)
          : pairwise_similarity(test.text, test.video, delta, cfg.inc.injection_side, cfg.tau);
  rec.metrics = retrieval_metrics(sim);

  // Hypersphere metrics of the positive pairs as scored (with delta_ii).
  Matrix text = test.text;
  Matrix video = test.video;
  Matrix& moved = cfg.inc.injection_side == Side::text ? text : video;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto inc = delta.pair(i, i);
    for (std::size_t k = 0; k < inc.size(); ++k) moved(i, k) += inc[k];
  }
  rec.hypersphere = alignment_uniformity(text, video);
  rec.geometry = geometry_snapshot(test, delta, cfg.inc, probes);
  return rec;
}

void check_finite(const LossBreakdown& l, std::size_t step, double max_grad) {
  const std::pair<const char*, double> terms[] = {
      {"l_info", l.l_info}, {"l_ib", l.l_ib}, {"l_eps", l.l_eps}, {"l_dir", l.l_dir}, {"total", l.total}};
  for (const auto& [name, v] : terms)
    if (!finite(v)) throw TrainingDivergence(step, name, max_grad);
}

nlohmann::json geometry_json(const GeometryReport& g) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& a : g.aggregates) out[a.field] = number(a.mean);
  return out;
}

}  // namespace

RunRecord run_experiment(const Dataset& dataset, const TrainConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::size_t dim = dataset.spec.dim;
  const RngStream root(cfg.seed);
  RngStream init_rng = root.split(kInit);
  RngStream shuffle_rng = root.split(kShuffle);

  RunRecord run;
  run.params = PsiParams::initialize(dim, init_rng);
  AdamState adam;
  const PairedBatch test = dataset.batch(dataset.test);

  std::ostringstream probe_rows;
  auto snapshot = [&](std::size_t epoch, std::size_t step) {
    EpochRecord rec = evaluate_epoch(epoch, test, run.params, cfg, options.probes);
    write_aggregates_rows(probe_rows, std::to_string(epoch) + "," + std::to_string(step),
                          rec.geometry);
    return rec;
  };

  run.epochs.push_back(snapshot(0, 0));
  std::size_t step = 0;
  LossBreakdown last_epoch;
  std::size_t last_epoch_steps = 0;

  auto train_step = [&](const std::vector<std::size_t>& items, bool update) {
    const PairedBatch batch = dataset.batch(items);
    ag::Tape tape;
    const PsiVars vars = attach(tape, run.params, cfg.mode == TrainMode::gare);
    const LossGraph graph = total_loss(tape, batch, &vars, cfg);
    const LossBreakdown values = graph.values();
    check_finite(values, step, 0.0);
    if (update && cfg.mode == TrainMode::gare) {
      const ag::Gradients grads = tape.backward(graph.total);
      std::vector<Matrix> g = {grads[vars.w_q], grads[vars.w_k], grads[vars.w_v], grads[vars.w_o]};
      const double worst = max_abs_of(g);
      if (!finite(worst)) throw TrainingDivergence(step, "gradient", worst);
      adam_step({&run.params.w_q, &run.params.w_k, &run.params.w_v, &run.params.w_o}, g, adam,
                cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam);
    }
    return values;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    last_epoch = {};
    last_epoch_steps = 0;
    for (const auto& items : epoch_batches(dataset.train, cfg.batch_size, shuffle_rng)) {
      ++step;
      const LossBreakdown values = train_step(items, true);
      run.steps.push_back({step, epoch, values});
      accumulate(last_epoch, values);
      ++last_epoch_steps;
      if (options.probes.every_step) snapshot(epoch, step);
    }
    run.epochs.push_back(snapshot(epoch, step));
    if (options.log) {
      const auto& m = run.epochs.back().metrics.text_to_video;
      *options.log << mode_name(cfg.mode) << " seed " << cfg.seed << " epoch " << epoch
                   << ": l_info " << format_double(divided(last_epoch, last_epoch_steps).l_info)
                   << ", test t2v R@1 " << format_double(m.r1) << '\n';
      if (last_epoch.kl_floored > 0) {
        *options.log << "  KL variance floor applied " << last_epoch.kl_floored
                     << " times this epoch\n";
      }
    }
  }
  if (cfg.epochs == 0) {
    RngStream probe_rng = shuffle_rng;
    for (const auto& items : epoch_batches(dataset.train, cfg.batch_size, probe_rng)) {
      accumulate(last_epoch, train_step(items, false));
      ++last_epoch_steps;
    }
  }
  run.final_loss = divided(last_epoch, last_epoch_steps);

  const RunConfig full{dataset.spec, cfg, options.probes};
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& e : run.epochs) {
    metrics.push_back({{"epoch", e.epoch},
                       {"text_to_video", direction_json(e.metrics.text_to_video)},
                       {"video_to_text", direction_json(e.metrics.video_to_text)},
                       {"alignment", number(e.hypersphere.alignment)},
                       {"uniformity", number(e.hypersphere.uniformity)}});
  }
  run.manifest = {{"kind", kManifestKind},
                  {"version", 1},
                  {"config", to_json(full)},
                  {"seed", cfg.seed},
                  {"mode", mode_name(cfg.mode)},
                  {"epochs", cfg.epochs},
                  {"steps", step},
                  {"dataset_hash", dataset_hash(dataset)},
                  {"metrics", metrics},
                  {"final_loss", loss_json(run.final_loss)},
                  {"final_geometry", geometry_json(run.epochs.back().geometry)}};
  run.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (!options.out_dir.empty()) {
    namespace fs = std::filesystem;
    const fs::path dir(options.out_dir);
    fs::create_directories(dir);
    write_text(dir / "manifest.json", run.manifest.dump(2) + "\n");

    std::ostringstream loss;
    loss << "step,l_info,l_ib,l_eps,l_dir,total\n";
    for (const auto& s : run.steps) {
      loss << s.step << ',' << format_double(s.loss.l_info) << ',' << format_double(s.loss.l_ib)
           << ',' << format_double(s.loss.l_eps) << ',' << format_double(s.loss.l_dir) << ','
           << format_double(s.loss.total) << '\n';
    }
    write_text(dir / "loss.csv", loss.str());

    std::ostringstream table;
    table << "epoch,direction,R@1,R@5,R@10,MdR,MnR\n";
    std::ostringstream sphere;
    sphere << "epoch,alignment,uniformity_text,uniformity_video,uniformity\n";
    for (const auto& e : run.epochs) {
      const std::pair<const char*, const DirectionMetrics*> dirs[] = {
          {"text_to_video", &e.metrics.text_to_video}, {"video_to_text", &e.metrics.video_to_text}};
      for (const auto& [name, m] : dirs) {
        table << e.epoch << ',' << name << ',' << format_double(m->r1) << ','
              << format_double(m->r5) << ',' << format_double(m->r10) << ','
              << format_double(m->median_rank) << ',' << format_double(m->mean_rank) << '\n';
      }
      sphere << e.epoch << ',' << format_double(e.hypersphere.alignment) << ','
             << format_double(e.hypersphere.uniformity_text) << ','
             << format_double(e.hypersphere.uniformity_video) << ','
             << format_double(e.hypersphere.uniformity) << '\n';
    }
    write_text(dir / "metrics.csv", table.str());
    write_text(dir / "hypersphere.csv", sphere.str());

    std::ostringstream aggregates;
    write_aggregates_header(aggregates, "epoch,step", options.probes.bins);
    aggregates << probe_rows.str();
    write_text(dir / "aggregates.csv", aggregates.str());

    std::ostringstream pairs;
    write_pairs_csv(pairs, run.epochs.back().geometry);
    write_text(dir / "pairs.csv", pairs.str());

    save_checkpoint((dir / "psi.ckpt").string(), run.params);
    write_text(dir / "timing.json",
               nlohmann::json{{"wall_seconds", run.wall_seconds}}.dump(2) + "\n");
  }
  return run;
}

}  // namespace gare
