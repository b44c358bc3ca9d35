#include "gare/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "gare/contrastive.hpp"
#include "gare/increments.hpp"
#include "gare/regularizers.hpp"
#include "gare/trainer.hpp"

namespace gare {

namespace {

using ag::Var;

std::size_t between(RngStream& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

Matrix random(RngStream& rng, std::size_t r, std::size_t c, double std_dev = 1.0) {
  return gaussian_sample(rng, r, c, 0.0, std_dev);
}

// Loss instances keep tau in [0.1, 1] and D >= 4. With D = 2 and small tau the
// logits spread over ~20 units, the softmax saturates, and the loss becomes a
// difference of two nearly equal O(1/tau) terms: its differences then carry
// round-off far above the 1e-5 target while the gradient itself is ~1e-7.
constexpr std::size_t kMinLossDim = 4;

double temperature(RngStream& rng) { return 0.1 * std::pow(10.0, rng.uniform()); }

/// Sum of out * weights, so every output entry gets a generic cotangent.
Var weighted_sum(Var out, const Matrix& weights) {
  Var w = out.tape->constant(weights);
  return ag::scalar_mul(ag::mean(ag::mul(out, w)), static_cast<double>(weights.size()));
}

struct Instance {
  std::vector<Matrix> inputs;
  std::vector<bool> differentiable;
  GraphBuilder build;
};

/// Random single-op instance; non-scalar outputs are reduced by weighted_sum.
Instance op_instance(ag::OpKind kind, RngStream& rng) {
  using ag::OpKind;
  const std::size_t r = between(rng, 2, 5);
  const std::size_t c = between(rng, 2, 6);
  Instance in;
  auto unary = [&](Matrix x, auto f) {
    in.inputs = {std::move(x)};
    in.differentiable = {true};
    in.build = [f, seed = rng.next_u64()](ag::Tape&, const std::vector<Var>& v) {
      Var out = f(v[0]);
      RngStream wr(seed);
      return weighted_sum(out, gaussian_sample(wr, out.rows(), out.cols(), 0.0, 1.0));
    };
  };
  auto binary = [&](Matrix a, Matrix b, auto f) {
    in.inputs = {std::move(a), std::move(b)};
    in.differentiable = {true, true};
    in.build = [f, seed = rng.next_u64()](ag::Tape&, const std::vector<Var>& v) {
      Var out = f(v[0], v[1]);
      RngStream wr(seed);
      return weighted_sum(out, gaussian_sample(wr, out.rows(), out.cols(), 0.0, 1.0));
    };
  };

  switch (kind) {
    case OpKind::matmul: {
      const std::size_t k = between(rng, 2, 6);
      binary(random(rng, r, k), random(rng, k, c), [](Var a, Var b) { return ag::matmul(a, b); });
      break;
    }
    case OpKind::add:
      binary(random(rng, r, c), random(rng, r, c), [](Var a, Var b) { return ag::add(a, b); });
      break;
    case OpKind::sub:
      binary(random(rng, r, c), random(rng, r, c), [](Var a, Var b) { return ag::sub(a, b); });
      break;
    case OpKind::mul:
      binary(random(rng, r, c), random(rng, r, c), [](Var a, Var b) { return ag::mul(a, b); });
      break;
    case OpKind::scalar_mul: {
      const double s = rng.gaussian();
      unary(random(rng, r, c), [s](Var a) { return ag::scalar_mul(a, s); });
      break;
    }
    case OpKind::row_softmax:
      unary(random(rng, r, c), [](Var a) { return ag::row_softmax(a); });
      break;
    case OpKind::exp:
      unary(random(rng, r, c), [](Var a) { return ag::exp(a); });
      break;
    case OpKind::log: {
      Matrix x(r, c);
      for (auto& v : x.values()) v = 0.5 + 2.0 * rng.uniform();
      unary(std::move(x), [](Var a) { return ag::log(a); });
      break;
    }
    case OpKind::l2_norm_rows:
      unary(random(rng, r, c), [](Var a) { return ag::l2_norm_rows(a); });
      break;
    case OpKind::cosine_rows:
      binary(random(rng, r, c), random(rng, r, c), [](Var a, Var b) { return ag::cosine_rows(a, b); });
      break;
    case OpKind::mean:
      unary(random(rng, r, c), [](Var a) { return ag::mean(a); });
      break;
    case OpKind::variance: {
      const std::size_t ddof = rng.below(2);
      unary(random(rng, r, c), [ddof](Var a) { return ag::variance(a, ddof); });
      break;
    }
    case OpKind::logsumexp:
      unary(random(rng, r, c), [](Var a) { return ag::logsumexp(a); });
      break;
    case OpKind::negate:
      unary(random(rng, r, c), [](Var a) { return ag::negate(a); });
      break;
    case OpKind::clamp_min: {
      Matrix x = random(rng, r, c);
      double floor = rng.gaussian() * 0.5;
      // Keep every entry at least 1e-2 away from the kink.
      for (auto& v : x.values())
        if (std::abs(v - floor) < 1e-2) v = floor + (v >= floor ? 1e-2 : -1e-2) * 2.0;
      unary(std::move(x), [floor](Var a) { return ag::clamp_min(a, floor); });
      break;
    }
    case OpKind::square:
      unary(random(rng, r, c), [](Var a) { return ag::square(a); });
      break;
    case OpKind::transpose:
      unary(random(rng, r, c), [](Var a) { return ag::transpose(a); });
      break;
    case OpKind::reshape:
      unary(random(rng, r, c * 2), [c, r](Var a) { return ag::reshape(a, 2 * r, c); });
      break;
    case OpKind::gather_rows: {
      std::vector<std::size_t> index(between(rng, 1, 8));
      for (auto& k : index) k = rng.below(r);
      unary(random(rng, r, c), [index](Var a) { return ag::gather_rows(a, index); });
      break;
    }
    case OpKind::segment_mean: {
      const std::size_t groups = between(rng, 1, r);
      std::vector<std::size_t> group_of(r);
      for (std::size_t k = 0; k < r; ++k) group_of[k] = k < groups ? k : rng.below(groups);
      unary(random(rng, r, c), [group_of, groups](Var a) { return ag::segment_mean(a, group_of, groups); });
      break;
    }
    case OpKind::mix_rows: {
      const std::size_t k = between(rng, 1, 4);
      std::vector<std::size_t> index(r * k);
      for (auto& v : index) v = rng.below(c + 1);
      binary(random(rng, r, k), random(rng, c + 1, between(rng, 1, 6)),
             [index](Var w, Var x) { return ag::mix_rows(w, x, index); });
      break;
    }
    case OpKind::leaf:
      throw std::invalid_argument("op_instance: leaf has no backward rule");
  }
  return in;
}

CheckResult run_check(const std::string& name, const GradcheckOptions& opt, RngStream rng,
                      const std::function<Instance(RngStream&)>& make) {
  CheckResult res;
  res.name = name;
  res.threshold = opt.threshold;
  for (std::size_t k = 0; k < opt.instances; ++k) {
    RngStream instance_rng = rng.split(k);
    const Instance in = make(instance_rng);
    res.worst_relative_error = std::max(
        res.worst_relative_error, finite_difference_error(in.build, in.inputs, in.differentiable, opt.step));
    ++res.instances;
  }
  return res;
}

/// Result for a closed-form gradient compared with differences of a plain
/// scalar function of one matrix.
CheckResult run_closed_form(const std::string& name, const GradcheckOptions& opt, RngStream rng,
                            const std::function<double(RngStream&)>& one) {
  CheckResult res;
  res.name = name;
  res.threshold = opt.threshold;
  for (std::size_t k = 0; k < opt.instances; ++k) {
    RngStream instance_rng = rng.split(k);
    res.worst_relative_error = std::max(res.worst_relative_error, one(instance_rng));
    ++res.instances;
  }
  return res;
}

/// Fourth-order central stencil at step h:
/// (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, differences first so a
/// locally constant f gives exactly zero.
Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  auto at = [&](std::size_t e, double offset) {
    probe[e] = x[e] + offset;
    const double v = f(probe);
    probe[e] = x[e];
    return v;
  };
  for (std::size_t e = 0; e < x.size(); ++e) {
    const double near = at(e, h) - at(e, -h);
    const double far = at(e, 2.0 * h) - at(e, -2.0 * h);
    g[e] = (8.0 * near - far) / (12.0 * h);
  }
  return g;
}

/// Relative error with a floor on the denominator: gradients that are zero by
/// construction (e.g. W_q and W_k with a single context token) are compared
/// absolutely instead of producing 0/0.
double gradient_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
  const double scale = std::max({l2_norm(analytic), l2_norm(numeric), kGradientFloor});
  return std::sqrt(diff) / scale;
}

void add_ops(std::vector<CheckResult>& out, const GradcheckOptions& opt, const RngStream& root) {
  for (ag::OpKind kind : ag::all_ops()) {
    const auto id = static_cast<std::uint64_t>(kind);
    out.push_back(run_check("op:" + std::string(ag::op_name(kind)), opt, root.split(100 + id),
                            [kind](RngStream& rng) { return op_instance(kind, rng); }));
  }
}

void add_contrastive(std::vector<CheckResult>& out, const GradcheckOptions& opt,
                     const RngStream& root) {
  out.push_back(run_closed_form("contrastive:grad_anchor_analytic", opt, root.split(201), [&](RngStream& rng) {
    const std::size_t b = between(rng, 2, 8), d = between(rng, kMinLossDim, 16);
    const double tau = temperature(rng);
    const Matrix t = random(rng, b, d), v = random(rng, b, d);
    const std::size_t i = rng.below(b);
    const ProbMatrix p = probabilities(pairwise_similarity(t, v, tau), SoftmaxAxis::rows);
    std::vector<double> y(b, 0.0);
    y[i] = 1.0;
    const auto analytic = grad_anchor_analytic(t.row_span(i), v, p.p.row_span(i), y, tau);
    const Matrix anchor = Matrix::row(t.row_span(i));
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& a) {
          std::vector<double> s(b);
          for (std::size_t j = 0; j < b; ++j) s[j] = cosine(a.row_span(0), v.row_span(j));
          return infonce_anchor(s, i, tau);
        },
        anchor, opt.step);
    return gradient_error(analytic, numeric.values());
  }));

  out.push_back(run_closed_form("contrastive:grad_perturbed_anchor", opt, root.split(202), [&](RngStream& rng) {
    const std::size_t b = between(rng, 2, 8), d = between(rng, kMinLossDim, 16);
    const double tau = temperature(rng);
    const Matrix t = random(rng, b, d), v = random(rng, b, d);
    const Matrix delta = random(rng, b * b, d, 0.3);
    const ProbMatrix p = probabilities(
        pairwise_similarity(t, v, IncrementTensor(b, delta), Side::text, tau), SoftmaxAxis::rows);
    Matrix analytic(b * b, d);
    std::vector<double> moved(d);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t k = 0; k < d; ++k) moved[k] = t(i, k) + delta(i * b + j, k);
        const auto g = grad_perturbed_anchor(moved, v.row_span(j), p.p(i, j), p.label(i, j), tau);
        std::copy(g.begin(), g.end(), analytic.row_span(i * b + j).begin());
      }
    }
    // Sum of the text->video anchor losses.
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& x) {
          return static_cast<double>(b) *
                 infonce_text_to_video(pairwise_similarity(t, v, IncrementTensor(b, x), Side::text, tau));
        },
        delta, opt.step);
    return gradient_error(analytic.values(), numeric.values());
  }));

  auto loss_instance = [](bool symmetric) {
    return [symmetric](RngStream& rng) {
      const std::size_t b = between(rng, 2, 8), d = between(rng, kMinLossDim, 16);
      const double tau = temperature(rng);
      const Side side = rng.below(2) == 0 ? Side::text : Side::video;
      Instance in;
      in.inputs = {random(rng, b, d), random(rng, b, d), random(rng, b * b, d, 0.3)};
      in.differentiable = {true, true, true};
      in.build = [tau, side, symmetric](ag::Tape&, const std::vector<Var>& v) {
        Var sim = similarity_on_tape(v[0], v[1], v[2], side);
        return symmetric ? infonce_symmetric_on_tape(sim, tau) : infonce_text_to_video_on_tape(sim, tau);
      };
      return in;
    };
  };
  out.push_back(run_check("contrastive:infonce_text_to_video", opt, root.split(203), loss_instance(false)));
  out.push_back(run_check("contrastive:infonce_symmetric", opt, root.split(204), loss_instance(true)));
}

void add_regularizers(std::vector<CheckResult>& out, const GradcheckOptions& opt,
                      const RngStream& root) {
  auto instance = [](auto loss) {
    return [loss](RngStream& rng) {
      const std::size_t b = between(rng, 2, 8), d = between(rng, 2, 16);
      Instance in;
      in.inputs = {random(rng, b * b, d)};
      in.differentiable = {true};
      const std::uint64_t knob = rng.next_u64();
      in.build = [loss, b, knob](ag::Tape&, const std::vector<Var>& v) { return loss(v[0], b, knob); };
      return in;
    };
  };
  // A lambda far below any attainable variance keeps the clamp inactive.
  out.push_back(run_check("regularizers:variance_loss", opt, root.split(301),
                          instance([](Var x, std::size_t b, std::uint64_t knob) {
                            const auto est = knob % 2 == 0 ? VarianceEstimator::population
                                                           : VarianceEstimator::sample;
                            return variance_loss(x, b, 1e6, est);
                          })));
  out.push_back(run_check("regularizers:variance_loss_lse", opt, root.split(302),
                          instance([](Var x, std::size_t b, std::uint64_t) { return variance_loss_lse(x, b); })));
  out.push_back(run_check("regularizers:direction_loss", opt, root.split(303),
                          instance([](Var x, std::size_t b, std::uint64_t knob) {
                            const double sigma = 0.5 + 3.5 * static_cast<double>(knob % 1000) / 1000.0;
                            return direction_loss(x, b, sigma);
                          })));
  out.push_back(run_check("regularizers:kl_ib_loss", opt, root.split(304),
                          instance([](Var x, std::size_t b, std::uint64_t knob) {
                            return kl_ib_loss(x, b, knob % 2 == 0 ? Side::video : Side::text).loss;
                          })));
}

PsiParams random_psi(RngStream& rng, std::size_t d) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {random(rng, d, d, s), random(rng, d, d, s), random(rng, d, d, s), random(rng, d, d, s)};
}

IncrementConfig random_increment_config(RngStream& rng) {
  IncrementConfig cfg;
  cfg.eta = rng.below(2) == 0 ? 1 : -1;
  cfg.context_side = rng.below(2) == 0 ? Side::video : Side::text;
  cfg.injection_side = rng.below(2) == 0 ? Side::text : Side::video;
  return cfg;
}

void add_psi(std::vector<CheckResult>& out, const GradcheckOptions& opt, const RngStream& root) {
  out.push_back(run_check("psi:info_loss", opt, root.split(401), [](RngStream& rng) {
    const std::size_t b = 4, d = 8, l = between(rng, 1, 4);
    const double tau = temperature(rng);
    const IncrementConfig cfg = random_increment_config(rng);
    const PsiParams p = random_psi(rng, d);
    const Matrix t = random(rng, b, d), v = random(rng, b, d), ctx = random(rng, b * l, d);
    Instance in;
    in.inputs = {p.w_q, p.w_k, p.w_v, p.w_o, t, v, ctx};
    in.differentiable = {true, true, true, true, false, false, false};
    in.build = [l, tau, cfg](ag::Tape&, const std::vector<Var>& x) {
      const PsiVars psi{x[0], x[1], x[2], x[3]};
      Var delta = psi_forward(x[4], x[5], x[6], l, cfg, psi);
      return infonce_symmetric_on_tape(similarity_on_tape(x[4], x[5], delta, cfg.injection_side), tau);
    };
    return in;
  }));

  out.push_back(run_check("psi:total_loss", opt, root.split(402), [](RngStream& rng) {
    const std::size_t b = 4, d = 8, l = between(rng, 1, 4);
    TrainConfig cfg;
    cfg.tau = temperature(rng);
    cfg.inc = random_increment_config(rng);
    cfg.reg.lambda = 1e6;  // keep the variance clamp inactive
    cfg.reg.ib_anchor = rng.below(2) == 0 ? Side::video : Side::text;
    const PsiParams p = random_psi(rng, d);
    auto batch = std::make_shared<PairedBatch>();
    batch->text_tokens_per_item = batch->video_tokens_per_item = l;
    batch->text_tokens = random(rng, b * l, d);
    batch->video_tokens = random(rng, b * l, d);
    batch->text = random(rng, b, d);
    batch->video = random(rng, b, d);
    batch->labels = {0, 1, 2, 3};
    batch->false_negative.assign(b * b, 0);
    Instance in;
    in.inputs = {p.w_q, p.w_k, p.w_v, p.w_o};
    in.differentiable = {true, true, true, true};
    in.build = [batch, cfg](ag::Tape& tape, const std::vector<Var>& x) {
      const PsiVars psi{x[0], x[1], x[2], x[3]};
      return total_loss(tape, *batch, &psi, cfg).total;
    };
    return in;
  }));
}

}  // namespace

double finite_difference_error(const GraphBuilder& build, const std::vector<Matrix>& inputs,
                               const std::vector<bool>& differentiable, double step) {
  if (inputs.size() != differentiable.size()) {
    throw std::invalid_argument("finite_difference_error: flag count differs from input count");
  }
  ag::Tape tape;
  std::vector<Var> leaves;
  for (std::size_t k = 0; k < inputs.size(); ++k) leaves.push_back(tape.leaf(inputs[k], differentiable[k]));
  const Var root = build(tape, leaves);
  const ag::Gradients grads = tape.backward(root);

  auto evaluate = [&](const std::vector<Matrix>& values) {
    ag::Tape t;
    std::vector<Var> vs;
    for (const auto& m : values) vs.push_back(t.constant(m));
    return build(t, vs).scalar();
  };

  double worst = 0.0;
  std::vector<Matrix> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!differentiable[k]) continue;
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& x) {
          probe[k] = x;
          return evaluate(probe);
        },
        inputs[k], step);
    probe[k] = inputs[k];
    worst = std::max(worst, gradient_error(grads[leaves[k]].values(), numeric.values()));
  }
  return worst;
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"all", "ops", "contrastive", "regularizers", "psi"};
  return names;
}

std::vector<CheckResult> run_gradcheck(const std::string& module, const GradcheckOptions& options) {
  const auto& names = gradcheck_modules();
  if (std::find(names.begin(), names.end(), module) == names.end()) {
    throw std::invalid_argument("unknown gradcheck module: " + module);
  }
  const RngStream root(options.seed);
  std::vector<CheckResult> out;
  const bool all = module == "all";
  if (all || module == "ops") add_ops(out, options, root);
  if (all || module == "contrastive") add_contrastive(out, options, root);
  if (all || module == "regularizers") add_regularizers(out, options, root);
  if (all || module == "psi") add_psi(out, options, root);
  return out;
}

}  // namespace gare
