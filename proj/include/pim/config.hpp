#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "pim/baselines.hpp"
#include "pim/imitator.hpp"
#include "pim/raster.hpp"
#include "pim/scene.hpp"
#include "pim/simloop.hpp"
#include "pim/trainer.hpp"

namespace pim {

struct BaselineConfig {
  double sigma = 0.1;
  int gmm_components = 3;
  int gmm_max_iter = 200;
  double gmm_tol = 1e-8;
  // Negative: use the FN ratio measured on the fitting corpus.
  double fn_ratio = -1.0;
};

/// Unified run configuration. Every section mirrors a module config; the
/// imitator's input channel count follows the positional encoding.
struct RunConfig {
  std::uint64_t seed = 0;
  GridSpec grid = GridSpec::desk();
  PosEncSpec posenc;
  GeneratorConfig generator;
  TargetProxySpec proxy;
  ImitatorConfig imitator;
  TrainConfig train;
  SimConfig sim;
  ScenarioConfig scenario;
  BaselineConfig baseline;

  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const GridSpec& g);
nlohmann::json to_json(const GeneratorConfig& g);
nlohmann::json to_json(const ScenarioConfig& s);
nlohmann::json to_json(const BaselineConfig& b);
nlohmann::json to_json(const RunConfig& c);

/// Strict: keys not present in the resolved defaults raise ConfigError with
/// the dotted path of the offending key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible, else taken as a string. Only existing scalar keys may be set.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// 16 hex digits of a stable hash over the resolved configuration.
std::string config_hash(const RunConfig& c);

}  // namespace pim
