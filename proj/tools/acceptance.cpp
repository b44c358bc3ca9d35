// Acceptance suite: runs criteria A1-A8 and prints one PASS/FAIL line each.
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gare/cli.hpp"
#include "gare/config.hpp"
#include "gare/contrastive.hpp"
#include "gare/gradcheck.hpp"
#include "gare/increments.hpp"
#include "gare/regularizers.hpp"
#include "gare/trustregion.hpp"

#ifndef GARE_ACCEPTANCE_CONFIG
#define GARE_ACCEPTANCE_CONFIG "configs/acceptance.json"
#endif

using namespace gare;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "gare");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (code != 0) std::cerr << "  command failed (" << code << "): " << e.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TrustRegionProblem random_problem(RngStream& rng, std::size_t b, std::size_t d, double tau, Side side) {
  TrustRegionProblem p;
  p.text = gaussian_sample(rng, b, d, 0.0, 1.0);
  p.video = gaussian_sample(rng, b, d, 0.0, 1.0);
  p.tau = tau;
  p.side = side;
  return p;
}

// ---- A1 ---------------------------------------------------------------------

Verdict a1() {
  const auto t0 = Clock::now();
  const std::vector<CheckResult> results = run_gradcheck("all");
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t min_instances = SIZE_MAX;
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed();
    min_instances = std::min(min_instances, r.instances);
    if (r.worst_relative_error >= worst) {
      worst = r.worst_relative_error;
      worst_name = r.name;
    }
  }
  ok = ok && min_instances >= 100 && elapsed < 60.0;
  return {ok, std::to_string(results.size()) + " checks, >= " + std::to_string(min_instances) +
                  " instances each, worst rel err " + num(worst, 3) + " (" + worst_name + "), " +
                  num(elapsed, 3) + " s"};
}

// ---- A2 ---------------------------------------------------------------------

Verdict a2() {
  // (i) closed-form step sizes
  const double eps = 0.37;
  const std::vector<double> zero(3, 0.0), tangent{0.0, 1.0, 0.0}, colinear{1.0, 0.0, 0.0},
      boundary{eps, 0.0, 0.0};
  const double e1 = std::abs(step_size_alpha(zero, tangent, eps) - eps);
  const double e2 = std::abs(step_size_alpha(boundary, tangent, eps));
  const double e3 = std::abs(step_size_alpha(boundary, colinear, eps) - 2 * eps);
  const bool cases = e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12;

  // (ii) feasibility after every coupled step
  RngStream rng(211);
  double worst_excess = -1e300;
  for (int run = 0; run < 200; ++run) {
    const Side side = run % 2 ? Side::video : Side::text;
    const TrustRegionProblem p = random_problem(rng, 2 + rng.below(7), 2 + rng.below(15), 0.01, side);
    const double radius = default_epsilon(p);
    TrustRegionState s = start_state(p, IncrementTensor::zeros(p.batch(), p.dim()), radius);
    for (int step = 0; step < 20; ++step) {
      s = iterate_coupled(p, std::move(s), 1);
      for (double n : s.delta.norms()) worst_excess = std::max(worst_excess, n - radius);
    }
  }
  const bool feasible = worst_excess <= 1e-9;

  // (iii) the noniterative step against ball samples, pair by pair
  std::size_t violations = 0, pairs = 0;
  for (int problem = 0; problem < 10; ++problem) {
    const TrustRegionProblem p = random_problem(rng, 8, 16, 0.01, problem % 2 ? Side::video : Side::text);
    const double radius = default_epsilon(p);
    const IncrementTensor step = noniterative_step(p, radius);
    const Matrix g = coupled_gradients(p, IncrementTensor::zeros(8, 16));
    for (std::size_t q = 0; q < g.rows(); ++q) {
      ++pairs;
      const double best = dot(g.row_span(q), step.matrix().row_span(q));
      for (int s = 0; s < 1000; ++s) {
        std::vector<double> x(16);
        for (double& v : x) v = rng.gaussian();
        const double n = l2_norm(x);
        for (double& v : x) v *= radius / n;
        if (dot(g.row_span(q), x) < best) ++violations;
      }
    }
  }
  return {cases && feasible && violations == 0,
          "alpha errs " + num(e1, 2) + "/" + num(e2, 2) + "/" + num(e3, 2) + "; max norm excess " +
              num(worst_excess, 3) + " over 200 runs x 20 steps; " + std::to_string(violations) +
              " violations over " + std::to_string(pairs) + " pairs x 1000 samples"};
}

// ---- A3 ---------------------------------------------------------------------

Verdict a3(double tau) {
  const auto t0 = Clock::now();
  RngStream rng(313);
  std::size_t descended = 0;
  const std::size_t runs = 200;
  for (std::size_t k = 0; k < runs; ++k) {
    const TrustRegionProblem p = random_problem(rng, 8, 16, tau, Side::text);
    TrustRegionState s = start_state(p, IncrementTensor::zeros(8, 16), default_epsilon(p));
    s = iterate_coupled(p, std::move(s), 20);
    if (s.trajectory.back().true_loss < s.trajectory.front().true_loss) ++descended;
  }
  const double share = 100.0 * static_cast<double>(descended) / static_cast<double>(runs);
  const double elapsed = seconds_since(t0);
  return {share >= 90.0 && elapsed < 300.0, std::to_string(descended) + "/" + std::to_string(runs) +
                                                 " batches descend (" + num(share) + "%), " +
                                                 num(elapsed, 3) + " s"};
}

// ---- A4 ---------------------------------------------------------------------

Verdict a4() {
  const std::size_t b = 7;
  const double uniform = infonce_symmetric({Matrix(b, b, 0.3), 0.01});
  const double e_uniform = std::abs(uniform - std::log(static_cast<double>(b)));

  Matrix prior(16, 5);
  const int pattern[4][4] = {{-1, -1, 1, 1}, {1, -1, -1, 1}, {1, 1, -1, -1}, {-1, 1, 1, -1}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 5; ++k) prior(i * 4 + j, k) = pattern[(k + j) % 4][i];
  const double kl = std::abs(kl_ib_loss(IncrementTensor(4, prior), Side::video));

  Matrix norms(4, 3);
  norms(1, 0) = 2.0;
  norms(3, 0) = 2.0;
  const double clamp = variance_loss(IncrementTensor(2, norms), 0.5);

  Matrix equal(4, 3);
  for (std::size_t p = 0; p < 4; ++p) equal(p, 0) = 1.5;
  const double e_lse = std::abs(variance_loss_lse(IncrementTensor(2, equal)) - std::log(2.0));

  Matrix antipodal(4, 2);
  antipodal(0, 0) = 1.0;
  antipodal(1, 0) = -3.0;
  antipodal(2, 1) = 2.0;
  antipodal(3, 1) = -0.5;
  const double e_dir = std::abs(direction_loss(IncrementTensor(2, antipodal), 2.0) + 4.0);

  const bool ok = e_uniform <= 1e-12 && kl <= 1e-9 && clamp == -0.5 && e_lse <= 1e-12 && e_dir <= 1e-12;
  return {ok, "log B err " + num(e_uniform, 2) + ", KL " + num(kl, 2) + ", clamp " + num(clamp) +
                  ", lse err " + num(e_lse, 2) + ", direction err " + num(e_dir, 2)};
}

// ---- A5, A6 -----------------------------------------------------------------

struct Trend {
  Verdict a5, a6;
};

Trend a5_a6(const std::string& config, const fs::path& work) {
  const fs::path data = work / "data";
  if (run_cli({"gen-data", "--config", config, "--out", data.string(), "--force"}) != 0)
    return {{false, "gen-data failed"}, {false, "gen-data failed"}};

  std::vector<std::string> manifests;
  std::map<std::string, std::vector<nlohmann::json>> by_mode;
  for (const std::string mode : {"baseline", "gare"}) {
    for (int seed = 1; seed <= 5; ++seed) {
      const fs::path out = work / (mode + "_" + std::to_string(seed));
      if (run_cli({"train", "--config", config, "--data", data.string(), "--out", out.string(), "--mode",
                   mode, "--seed", std::to_string(seed), "--force", "--quiet"}) != 0)
        return {{false, "train failed"}, {false, "train failed"}};
      manifests.push_back((out / "manifest.json").string());
      by_mode[mode].push_back(nlohmann::json::parse(slurp(out / "manifest.json")));
    }
  }
  std::vector<std::string> args = {"compare", "--csv", (work / "compare.csv").string(), "--runs"};
  args.insert(args.end(), manifests.begin(), manifests.end());
  std::string table;
  run_cli(args, &table);
  std::cout << table;

  auto mean = [&](const std::string& mode, const std::function<double(const nlohmann::json&)>& f) {
    double s = 0.0;
    for (const auto& m : by_mode[mode]) s += f(m);
    return s / static_cast<double>(by_mode[mode].size());
  };
  auto r1 = [](const nlohmann::json& m) { return m["metrics"].back()["text_to_video"]["R@1"].get<double>(); };
  auto info = [](const nlohmann::json& m) { return m["final_loss"]["l_info"].get<double>(); };
  const double rg = mean("gare", r1), rb = mean("baseline", r1);
  const double lg = mean("gare", info), lb = mean("baseline", info);
  Verdict v5{rg > rb && lg < lb, "t2v R@1 gare " + num(rg) + " vs baseline " + num(rb) + " (" +
                                     num(rg - rb, 3) + "), final l_info " + num(lg) + " vs " + num(lb)};

  int obtuse = 0, farther = 0;
  std::string angles;
  for (const auto& m : by_mode["gare"]) {
    const auto& g = m["final_geometry"];
    const double a = g["angle_delta_gap"].is_number() ? g["angle_delta_gap"].get<double>() : std::nan("");
    obtuse += a > std::numbers::pi / 2;
    farther += g["dist_delta"].get<double>() > g["dist"].get<double>();
    angles += (angles.empty() ? "" : " ") + num(a, 3);
  }
  Verdict v6{obtuse >= 4 && farther >= 4, "obtuse in " + std::to_string(obtuse) +
                                              "/5 seeds (angles " + angles + "), farther in " +
                                              std::to_string(farther) + "/5"};
  return {v5, v6};
}

// ---- A7 ---------------------------------------------------------------------

Verdict a7() {
  const std::size_t d = 32;
  std::vector<double> sizes, times;
  RngStream rng(717);
  RngStream init = rng.split(1);
  PsiParams params = PsiParams::initialize(d, init);
  params.w_o = gaussian_sample(init, d, d, 0.0, 0.1);
  const IncrementConfig cfg;
  for (std::size_t b : {32u, 64u, 128u}) {
    const Matrix text = gaussian_sample(rng, b, d, 0.0, 1.0);
    const Matrix video = gaussian_sample(rng, b, d, 0.0, 1.0);
    const Matrix tokens = gaussian_sample(rng, b * 4, d, 0.0, 1.0);
    const std::size_t inner = 2 * (128 / b) * (128 / b);
    std::vector<double> reps;
    double sink = 0.0;
    for (int r = 0; r < 5; ++r) {
      const auto t0 = Clock::now();
      for (std::size_t n = 0; n < inner; ++n) {
        const IncrementTensor delta = psi_forward(text, video, tokens, 4, cfg, params);
        sink += pairwise_similarity(text, video, delta, cfg.injection_side, 0.01).s(0, 0);
      }
      reps.push_back(seconds_since(t0) / static_cast<double>(inner));
    }
    if (!std::isfinite(sink)) return {false, "non-finite similarity"};
    std::sort(reps.begin(), reps.end());
    sizes.push_back(std::log2(static_cast<double>(b)));
    times.push_back(std::log2(reps[2]));
  }
  // Least-squares slope of log2 t on log2 B; the doubling ratio is 2^slope.
  const double mx = (sizes[0] + sizes[1] + sizes[2]) / 3, my = (times[0] + times[1] + times[2]) / 3;
  double sxy = 0.0, sxx = 0.0;
  for (int k = 0; k < 3; ++k) {
    sxy += (sizes[k] - mx) * (times[k] - my);
    sxx += (sizes[k] - mx) * (sizes[k] - mx);
  }
  const double ratio = std::exp2(sxy / sxx);
  return {ratio >= 3.0 && ratio <= 5.3,
          "median ms at B=32/64/128: " + num(std::exp2(times[0]) * 1e3, 3) + "/" +
              num(std::exp2(times[1]) * 1e3, 3) + "/" + num(std::exp2(times[2]) * 1e3, 3) +
              ", step ratios " + num(std::exp2(times[1] - times[0]), 3) + " " +
              num(std::exp2(times[2] - times[1]), 3) + ", fitted doubling ratio " + num(ratio, 3)};
}

// ---- A8 ---------------------------------------------------------------------

/// Names of files that differ between two run directories (timing.json aside).
std::vector<std::string> differing(const fs::path& a, const fs::path& b) {
  std::set<std::string> names;
  for (const auto* dir : {&a, &b})
    for (const auto& e : fs::directory_iterator(*dir)) names.insert(e.path().filename().string());
  std::vector<std::string> out;
  for (const auto& n : names) {
    if (n == "timing.json") continue;
    if (!fs::exists(a / n) || !fs::exists(b / n) || slurp(a / n) != slurp(b / n)) out.push_back(n);
  }
  return out;
}

Verdict a8(const std::string& config, const fs::path& work) {
  // A short training schedule keeps the rerun cheap; the code path is the same.
  RunConfig cfg = load_run_config(config);
  cfg.train.epochs = 2;
  const fs::path short_cfg = work / "determinism.json";
  std::ofstream(short_cfg) << to_json(cfg).dump(2) << '\n';

  std::vector<std::string> diffs;
  std::size_t files = 0;
  auto twice = [&](const std::string& tag, const std::function<std::vector<std::string>(const fs::path&)>& args) {
    const fs::path a = work / (tag + "_a"), b = work / (tag + "_b");
    if (run_cli(args(a)) != 0 || run_cli(args(b)) != 0) {
      diffs.push_back(tag + ": command failed");
      return;
    }
    for (const auto& n : differing(a, b)) diffs.push_back(tag + "/" + n);
    for (const auto& e : fs::directory_iterator(a)) files += e.path().filename() != "timing.json";
  };
  const std::string c = short_cfg.string();
  const std::string data = (work / "det_data_a").string();
  twice("det_data", [&](const fs::path& out) {
    return std::vector<std::string>{"gen-data", "--config", c, "--out", out.string(), "--force"};
  });
  for (const std::string mode : {"gare", "baseline"}) {
    twice("det_" + mode, [&](const fs::path& out) {
      return std::vector<std::string>{"train", "--config", c, "--data", data, "--out", out.string(),
                                      "--mode", mode, "--seed", "3", "--force", "--quiet"};
    });
  }
  twice("det_oracle", [&](const fs::path& out) {
    return std::vector<std::string>{"oracle", "--config", c, "--data", data, "--out", out.string(),
                                    "--steps", "5", "--batches", "4", "--force"};
  });
  twice("det_compare", [&](const fs::path& out) {
    fs::create_directories(out);
    return std::vector<std::string>{"compare", "--csv", (out / "compare.csv").string(), "--runs",
                                    (work / "det_gare_a" / "manifest.json").string(),
                                    (work / "det_baseline_a" / "manifest.json").string()};
  });
  std::string detail = std::to_string(files) + " files compared across gen-data, train (both modes), oracle, compare";
  for (const auto& d : diffs) detail += "; differs: " + d;
  return {diffs.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria A1-A8"};
  std::string config = GARE_ACCEPTANCE_CONFIG;
  std::string work = "acceptance_runs";
  std::vector<std::string> only;
  app.add_option("--config", config, "Run config for A5, A6 and A8");
  app.add_option("--work-dir", work, "Directory for datasets and runs");
  app.add_option("--only", only, "Subset of criteria, e.g. A1 A7");
  CLI11_PARSE(app, argc, argv);

  auto selected = [&](const std::string& id) {
    return only.empty() || std::find(only.begin(), only.end(), id) != only.end();
  };
  fs::create_directories(work);
  const double tau = load_run_config(config).train.tau;

  std::vector<std::pair<std::string, Verdict>> results;
  auto report = [&](const std::string& id, const Verdict& v) {
    std::cout << id << ' ' << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
    results.emplace_back(id, v);
  };
  if (selected("A1")) report("A1", a1());
  if (selected("A2")) report("A2", a2());
  if (selected("A3")) report("A3", a3(tau));
  if (selected("A4")) report("A4", a4());
  if (selected("A5") || selected("A6")) {
    const Trend t = a5_a6(config, fs::path(work) / "trend");
    if (selected("A5")) report("A5", t.a5);
    if (selected("A6")) report("A6", t.a6);
  }
  if (selected("A7")) report("A7", a7());
  if (selected("A8")) {
    fs::create_directories(fs::path(work) / "determinism");
    report("A8", a8(config, fs::path(work) / "determinism"));
  }

  int failed = 0;
  for (const auto& [id, v] : results) failed += !v.pass;
  std::cout << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
