#pragma once

#include "amoe/model.hpp"
#include "amoe/scoring.hpp"
#include "amoe/synthetic.hpp"
#include "amoe/trainer.hpp"

#include <filesystem>
#include <stdexcept>

#include <json.hpp>

namespace amoe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run depends on. `seed` feeds the model initialisation, the
// trainer and the synthetic generator.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  AggregateOptions aggregate;
  SyntheticConfig synth;

  // Copies `seed` into the sub-configs and validates them.
  void resolve();
};

nlohmann::json to_json(const RunConfig& c);
// Overlays `j` onto `c`. Unknown keys and type errors throw ConfigError naming
// the offending dotted key.
void merge_json(RunConfig& c, const nlohmann::json& j);
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});
// Overlays one dotted assignment such as "train.lr=1e-3" (value parsed as JSON,
// falling back to a plain string).
void apply_override(RunConfig& c, const std::string& assignment);

}  // namespace amoe
