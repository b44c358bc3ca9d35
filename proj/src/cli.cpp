#include "gare/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "gare/config.hpp"
#include "gare/gradcheck.hpp"
#include "gare/synthdata.hpp"
#include "gare/trainer.hpp"
#include "gare/trustregion.hpp"

namespace gare::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Creates `dir`, refusing a non-empty existing directory unless forced.
void prepare_out(const std::string& dir, bool force) {
  if (dir.empty()) throw UsageError("--out is required");
  const fs::path p(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw UsageError(dir + " exists and is not a directory");
    if (!fs::is_empty(p)) {
      if (!force) throw UsageError(dir + " is not empty; pass --force to overwrite");
      fs::remove_all(p);
    }
  }
  fs::create_directories(p);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingDivergence& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

Dataset load_data(const std::string& dir) {
  if (dir.empty() || !fs::is_directory(dir)) throw UsageError("dataset directory not found: " + dir);
  return load_dataset(dir);
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? std::nan("") : s / static_cast<double>(xs.size());
}

/// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

struct RunSummary {
  std::string mode;
  std::uint64_t seed = 0;
  std::string hash;
  std::map<std::string, double> values;
};

const std::vector<std::string>& compared_metrics() {
  static const std::vector<std::string> names = {
      "t2v R@1", "t2v R@5", "t2v R@10", "t2v MdR", "t2v MnR", "v2t R@1",
      "v2t R@5", "v2t R@10", "v2t MdR", "v2t MnR", "final l_info", "final total"};
  return names;
}

RunSummary summarize_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open manifest " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path + ": invalid JSON: " + e.what());
  }
  if (!doc.is_object() || doc.value("kind", "") != kManifestKind) {
    throw UsageError(path + " is not a run manifest");
  }
  RunSummary s;
  s.mode = doc.at("mode").get<std::string>();
  s.seed = doc.at("seed").get<std::uint64_t>();
  s.hash = doc.at("dataset_hash").get<std::string>();
  const auto& last = doc.at("metrics").back();
  for (const auto& [prefix, key] : {std::pair{"t2v", "text_to_video"}, std::pair{"v2t", "video_to_text"}}) {
    for (const char* m : {"R@1", "R@5", "R@10", "MdR", "MnR"}) {
      s.values[std::string(prefix) + " " + m] = last.at(key).at(m).get<double>();
    }
  }
  auto loss = [&](const char* k) {
    const auto& v = doc.at("final_loss").at(k);
    return v.is_null() ? std::nan("") : v.get<double>();
  };
  s.values["final l_info"] = loss("l_info");
  s.values["final total"] = loss("total");
  return s;
}

std::string fixed(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}

}  // namespace

int gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.config.empty()) throw UsageError("--config is required");
    const RunConfig cfg = load_run_config(args.config);
    prepare_out(args.out, args.force);
    const Dataset data = generate(cfg.data);
    save_dataset(data, args.out);
    const ModalityStatistics stats = modality_statistics(data.all);
    out << "wrote " << data.all.size() << " items to " << args.out << " (hash " << dataset_hash(data)
        << ", centroid cosine " << fixed(stats.centroid_cosine) << ", matched cosine "
        << fixed(stats.matched_pair_cosine) << ")\n";
    return kExitOk;
  });
}

int train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_or_default(args.config);
    if (args.mode) {
      if (*args.mode == "baseline") cfg.train.mode = TrainMode::baseline;
      else if (*args.mode == "gare") cfg.train.mode = TrainMode::gare;
      else throw UsageError("--mode must be baseline or gare");
    }
    if (args.seed) cfg.train.seed = *args.seed;
    const Dataset data = load_data(args.data);
    prepare_out(args.out, args.force);
    RunOptions options;
    options.probes = cfg.probes;
    options.out_dir = args.out;
    options.log = args.quiet ? nullptr : &err;
    const RunRecord run = run_experiment(data, cfg.train, options);
    const auto& m = run.epochs.back().metrics;
    out << mode_name(cfg.train.mode) << " seed " << cfg.train.seed << ": test t2v R@1 "
        << fixed(m.text_to_video.r1) << ", v2t R@1 " << fixed(m.video_to_text.r1)
        << ", final l_info " << fixed(run.final_loss.l_info) << '\n';
    return kExitOk;
  });
}

int oracle(const OracleArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = config_or_default(args.config);
    const Dataset data = load_data(args.data);
    if (args.batch_size < 1 || args.batch_size > data.train.size()) {
      throw UsageError("--batch-size must lie in [1, train items]");
    }
    if (args.epsilon && !(*args.epsilon > 0.0)) throw UsageError("--epsilon must be positive");
    prepare_out(args.out, args.force);

    RngStream rng = RngStream(cfg.train.seed).split(3);
    std::ostringstream summary;
    summary << "batch,epsilon,initial_loss,final_loss,descended\n";
    std::size_t descended = 0;
    for (std::size_t k = 0; k < args.batches; ++k) {
      const std::vector<std::size_t> order = permutation(rng, data.train.size());
      std::vector<std::size_t> items;
      for (std::size_t n = 0; n < args.batch_size; ++n) items.push_back(data.train[order[n]]);
      const PairedBatch batch = data.batch(items);
      const TrustRegionProblem problem{batch.text, batch.video, cfg.train.tau,
                                       cfg.train.inc.injection_side};
      const double eps = args.epsilon ? *args.epsilon : default_epsilon(problem);
      TrustRegionState state = start_state(problem, IncrementTensor::zeros(problem.batch(), problem.dim()), eps);
      state = iterate_coupled(problem, std::move(state), args.steps);

      std::ostringstream csv;
      write_trajectory_csv(csv, state.trajectory);
      write_file(fs::path(args.out) / ("trajectory_" + std::to_string(k) + ".csv"), csv.str());
      const double first = state.trajectory.front().true_loss;
      const double last = state.trajectory.back().true_loss;
      const bool down = last < first;
      descended += down ? 1 : 0;
      summary << k << ',' << format_double(eps) << ',' << format_double(first) << ','
              << format_double(last) << ',' << (down ? 1 : 0) << '\n';
    }
    write_file(fs::path(args.out) / "summary.csv", summary.str());
    const double share = args.batches ? 100.0 * static_cast<double>(descended) / static_cast<double>(args.batches) : 0.0;
    out << "descent census: " << descended << "/" << args.batches << " batches (" << fixed(share)
        << "%) end below their initial loss after " << args.steps << " steps\n";
    return kExitOk;
  });
}

int gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::optional<ag::OpKind> fault;
    if (args.inject_fault) {
      fault = ag::op_from_name(*args.inject_fault);
      if (!fault) throw UsageError("unknown op " + *args.inject_fault);
    }
    ag::testing::inject_backward_fault(fault);
    GradcheckOptions options;
    options.instances = args.instances;
    std::vector<CheckResult> results;
    try {
      results = run_gradcheck(args.module, options);
    } catch (const std::invalid_argument& e) {
      ag::testing::inject_backward_fault(std::nullopt);
      throw UsageError(e.what());
    }
    ag::testing::inject_backward_fault(std::nullopt);

    std::vector<std::string> failing;
    for (const auto& r : results) {
      out << std::left << std::setw(40) << r.name << " worst rel err " << std::scientific
          << std::setprecision(3) << r.worst_relative_error << " (< " << r.threshold << ") "
          << (r.passed() ? "ok" : "FAIL") << std::defaultfloat << '\n';
      if (!r.passed()) failing.push_back(r.name);
    }
    if (!failing.empty()) {
      out << "failing checks:";
      for (const auto& f : failing) out << ' ' << f;
      out << '\n';
      return kExitCheckFailed;
    }
    out << results.size() << " checks passed\n";
    return kExitOk;
  });
}

int compare(const CompareArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.runs.size() < 2) throw UsageError("compare needs at least two manifests");
    std::vector<RunSummary> runs;
    for (const auto& path : args.runs) runs.push_back(summarize_manifest(path));
    for (const auto& r : runs) {
      if (r.hash != runs.front().hash) {
        throw UsageError("manifests come from different datasets (" + runs.front().hash + " vs " +
                         r.hash + ")");
      }
    }

    std::map<std::string, std::map<std::uint64_t, const RunSummary*>> by_mode;
    for (const auto& r : runs) by_mode[r.mode][r.seed] = &r;
    const bool paired = by_mode.contains("baseline") && by_mode.contains("gare");

    std::ostringstream csv;
    csv << "metric";
    for (const auto& [mode, seeds] : by_mode) csv << ',' << mode << "_n," << mode << "_mean," << mode << "_std";
    if (paired) csv << ",paired_n,diff_mean,diff_std";
    csv << '\n';

    out << std::left << std::setw(14) << "metric";
    for (const auto& [mode, seeds] : by_mode) out << std::setw(24) << (mode + " (n=" + std::to_string(seeds.size()) + ")");
    if (paired) out << "gare - baseline (paired)";
    out << '\n';

    for (const auto& metric : compared_metrics()) {
      csv << metric;
      out << std::setw(14) << metric;
      for (const auto& [mode, seeds] : by_mode) {
        std::vector<double> xs;
        for (const auto& [seed, r] : seeds) xs.push_back(r->values.at(metric));
        csv << ',' << xs.size() << ',' << format_double(mean_of(xs)) << ',' << format_double(std_of(xs));
        out << std::setw(24) << (fixed(mean_of(xs)) + " +- " + fixed(std_of(xs)));
      }
      if (paired) {
        std::vector<double> diffs;
        for (const auto& [seed, g] : by_mode["gare"]) {
          auto it = by_mode["baseline"].find(seed);
          if (it != by_mode["baseline"].end()) diffs.push_back(g->values.at(metric) - it->second->values.at(metric));
        }
        csv << ',' << diffs.size() << ',' << format_double(mean_of(diffs)) << ','
            << format_double(std_of(diffs));
        out << fixed(mean_of(diffs)) << " +- " << fixed(std_of(diffs));
      }
      csv << '\n';
      out << '\n';
    }
    if (!args.csv.empty()) write_file(args.csv, csv.str());
    return kExitOk;
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gap-aware contrastive toolkit: synthetic data, training, trust-region oracle and gradient checks"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen_cmd->add_option("--config", gen.config, "Run config (JSON)")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  std::string mode;
  std::uint64_t seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train psi (or the baseline) and write a run directory");
  train_cmd->add_option("--config", tr.config, "Run config or manifest (JSON)");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  auto* mode_opt = train_cmd->add_option("--mode", mode, "baseline or gare");
  auto* seed_opt = train_cmd->add_option("--seed", seed, "Training seed");
  train_cmd->add_flag("--force", tr.force, "Overwrite a non-empty output directory");
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  OracleArgs orc;
  double epsilon = 0.0;
  auto* oracle_cmd = app.add_subcommand("oracle", "Run the coupled trust-region iteration on sampled batches");
  oracle_cmd->add_option("--config", orc.config, "Run config (JSON)");
  oracle_cmd->add_option("--data", orc.data, "Dataset directory")->required();
  oracle_cmd->add_option("--out", orc.out, "Output directory")->required();
  oracle_cmd->add_option("--steps", orc.steps, "Coupled steps per batch");
  auto* eps_opt = oracle_cmd->add_option("--epsilon", epsilon, "Trust-region radius");
  oracle_cmd->add_option("--batches", orc.batches, "Number of sampled batches");
  oracle_cmd->add_option("--batch-size", orc.batch_size, "Items per batch");
  oracle_cmd->add_flag("--force", orc.force, "Overwrite a non-empty output directory");

  GradcheckArgs gc;
  std::string fault;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference certification suite");
  gc_cmd->add_option("--module", gc.module, "all|ops|contrastive|regularizers|psi");
  gc_cmd->add_option("--instances", gc.instances, "Random instances per check");
  auto* fault_opt = gc_cmd->add_option("--inject-fault", fault, "Perturb one backward rule")->group("");

  CompareArgs cmp;
  auto* cmp_cmd = app.add_subcommand("compare", "Tabulate run manifests across seeds and modes");
  cmp_cmd->add_option("--runs", cmp.runs, "Manifest files")->required();
  cmp_cmd->add_option("--csv", cmp.csv, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << e.what() << '\n';
    return kExitUsage;
  }

  if (*gen_cmd) return gen_data(gen, out, err);
  if (*train_cmd) {
    if (*mode_opt) tr.mode = mode;
    if (*seed_opt) tr.seed = seed;
    return train(tr, out, err);
  }
  if (*oracle_cmd) {
    if (*eps_opt) orc.epsilon = epsilon;
    return oracle(orc, out, err);
  }
  if (*gc_cmd) {
    if (*fault_opt) gc.inject_fault = fault;
    return gradcheck(gc, out, err);
  }
  if (*cmp_cmd) return compare(cmp, out, err);
  return kExitUsage;
}

}  // namespace gare::cli
