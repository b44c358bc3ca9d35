#include "gare/config.hpp"

#include <fstream>
#include <sstream>

namespace gare {

namespace {

std::string side_name(Side s) { return s == Side::text ? "text" : "video"; }

template <typename E>
void read_enum(StrictObject& o, std::string_view key, E& out,
               std::initializer_list<std::pair<const char*, E>> choices) {
  if (!o.has(key)) return;
  std::string name;
  o.read(key, name);
  for (const auto& [label, value] : choices) {
    if (name == label) {
      out = value;
      return;
    }
  }
  std::string allowed;
  for (const auto& [label, value] : choices) allowed += std::string(allowed.empty() ? "" : "|") + label;
  throw ConfigError(o.qualify(key), "expected one of " + allowed);
}

void read_side(StrictObject& o, std::string_view key, Side& out) {
  read_enum(o, key, out, {{"text", Side::text}, {"video", Side::video}});
}

}  // namespace

nlohmann::json regularizers_to_json(const RegularizerConfig& cfg) {
  return {{"lambda", cfg.lambda},
          {"sigma", cfg.sigma},
          {"w_ib", cfg.w_ib},
          {"w_eps", cfg.w_eps},
          {"w_dir", cfg.w_dir},
          {"ib_anchor", side_name(cfg.ib_anchor)},
          {"estimator", cfg.estimator == VarianceEstimator::population ? "population" : "sample"},
          {"variance_variant",
           cfg.variance_variant == VarianceVariant::clamp ? "clamp" : "log_sum_exp"}};
}

nlohmann::json train_to_json(const TrainConfig& cfg) {
  return {{"tau", cfg.tau},
          {"lr", cfg.lr},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"eps_adam", cfg.eps_adam},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"mode", mode_name(cfg.mode)},
          {"eta", cfg.inc.eta},
          {"context_side", side_name(cfg.inc.context_side)},
          {"injection_side", side_name(cfg.inc.injection_side)}};
}

nlohmann::json probes_to_json(const ProbeConfig& cfg) {
  return {{"bins", cfg.bins}, {"every_step", cfg.every_step}};
}

nlohmann::json to_json(const RunConfig& cfg) {
  return {{"data", spec_to_json(cfg.data)},
          {"train", train_to_json(cfg.train)},
          {"regularizers", regularizers_to_json(cfg.train.reg)},
          {"probes", probes_to_json(cfg.probes)}};
}

RunConfig run_config_from_json(const nlohmann::json& doc) {
  if (doc.is_object() && doc.contains("kind")) {
    if (doc.at("kind") != kManifestKind) throw ConfigError("kind", "unsupported document kind");
    if (!doc.contains("config")) throw ConfigError("config", "manifest has no config section");
    return run_config_from_json(doc.at("config"));
  }

  RunConfig cfg;
  StrictObject root(doc, "");
  if (root.has("data")) cfg.data = spec_from_json(doc.at("data"), "data");
  root.child("data");  // marks the key as used

  StrictObject train = root.child("train");
  TrainConfig& t = cfg.train;
  train.read("tau", t.tau);
  train.read("lr", t.lr);
  train.read("beta1", t.beta1);
  train.read("beta2", t.beta2);
  train.read("eps_adam", t.eps_adam);
  train.read_count("epochs", t.epochs);
  train.read_count("batch_size", t.batch_size);
  train.read_u64("seed", t.seed);
  read_enum(train, "mode", t.mode, {{"baseline", TrainMode::baseline}, {"gare", TrainMode::gare}});
  train.read("eta", t.inc.eta);
  read_side(train, "context_side", t.inc.context_side);
  read_side(train, "injection_side", t.inc.injection_side);
  train.finish();

  StrictObject reg = root.child("regularizers");
  RegularizerConfig& r = t.reg;
  reg.read("lambda", r.lambda);
  reg.read("sigma", r.sigma);
  reg.read("w_ib", r.w_ib);
  reg.read("w_eps", r.w_eps);
  reg.read("w_dir", r.w_dir);
  read_side(reg, "ib_anchor", r.ib_anchor);
  read_enum(reg, "estimator", r.estimator,
            {{"population", VarianceEstimator::population}, {"sample", VarianceEstimator::sample}});
  read_enum(reg, "variance_variant", r.variance_variant,
            {{"clamp", VarianceVariant::clamp}, {"log_sum_exp", VarianceVariant::log_sum_exp}});
  reg.finish();

  StrictObject probes = root.child("probes");
  probes.read_count("bins", cfg.probes.bins);
  probes.read("every_step", cfg.probes.every_step);
  probes.finish();
  if (cfg.probes.bins == 0) throw ConfigError("probes.bins", "must be positive");

  root.finish();
  t.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return run_config_from_json(doc);
}

}  // namespace gare
