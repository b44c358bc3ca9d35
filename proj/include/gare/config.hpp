// Run configuration files: one JSON document with optional "data", "train",
// "regularizers" and "probes" sections. Unknown keys are rejected with the
// full key path. A run manifest is also accepted; its "config" section is
// read and the recorded outputs are ignored.

#ifndef GARE_CONFIG_HPP
#define GARE_CONFIG_HPP

#include <string>

#include <nlohmann/json.hpp>

#include "gare/json_fields.hpp"
#include "gare/probes.hpp"
#include "gare/synthdata.hpp"
#include "gare/trainer.hpp"

namespace gare {

/// Marks a manifest document.
inline constexpr const char* kManifestKind = "gare-run";

struct RunConfig {
  SyntheticDatasetSpec data;
  TrainConfig train;
  ProbeConfig probes;
};

nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json train_to_json(const TrainConfig& cfg);
nlohmann::json regularizers_to_json(const RegularizerConfig& cfg);
nlohmann::json probes_to_json(const ProbeConfig& cfg);

/// Throws ConfigError naming the key on any problem.
RunConfig run_config_from_json(const nlohmann::json& doc);
/// Reads and parses a file; parse failures are reported as ConfigError.
RunConfig load_run_config(const std::string& path);

}  // namespace gare

#endif  // GARE_CONFIG_HPP
