#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lffs/attack.hpp"
#include "lffs/episodes.hpp"
#include "lffs/eval.hpp"
#include "lffs/finetune.hpp"
#include "lffs/model.hpp"
#include "lffs/pretrain.hpp"

namespace lffs {

/// Malformed, mistyped, unknown or out-of-range configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  SyntheticConfig generator;
  /// When both are set the FSDS files are used instead of <output>/base.fsds
  /// and <output>/novel.fsds.
  std::string base_path;
  std::string novel_path;
};

struct SeedConfig {
  std::uint64_t data = 1;
  std::uint64_t pretrain = 2;
  std::uint64_t eval = 3;
};

/// Thresholds and budgets of the directional desk experiment.
struct ClaimConfig {
  /// Vanilla episodes (a prefix of the vanilla ladder row) used for the collapse check.
  std::size_t collapse_episodes = 20;
  double collapse_ratio = 0.2;
  double robust_gap = 0.20;
  double clean_tolerance = 0.10;
  /// Radius of the fixed-radius ladder rows.
  std::size_t ladder_radius = 2;
  /// Episodes of the full pipeline also attacked through the ensemble; 0 skips it.
  std::size_t adaptive_episodes = 5;
  double collapse_seconds = 300;
  double claim_seconds = 600;
  double ladder_seconds = 1800;
  /// Runs everything twice and compares the artifacts byte for byte.
  bool check_determinism = true;
};

struct ExperimentConfig {
  DataConfig data;
  std::size_t width = 16;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  AttackConfig attack;
  bool dump_adversarial = false;
  /// Episode shape, count, inference mode and surfaces; the finetune, attack,
  /// seed and worker fields are filled from the sibling sections.
  EvalSettings eval;
  std::size_t finetune_episode = 0;
  bool export_features = false;
  SeedConfig seeds;
  int precision = 32;
  std::string output = "out";
  ClaimConfig claim;

  /// Backbone for a base set: its image geometry and class count, configured width.
  ConvNetConfig arch(const Dataset& base) const;
  PretrainConfig pretrain_config() const;
  EvalSettings eval_settings(std::size_t workers) const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Desk-scale defaults.
ExperimentConfig default_experiment_config();

/// Overlays `doc` onto `base`. Unknown keys and wrong types throw ConfigError.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc,
                                         const ExperimentConfig& base = default_experiment_config());
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Fully resolved config, every key present, in documentation order.
nlohmann::ordered_json to_json(const ExperimentConfig& config);

/// Replaces every per-stage seed with a stream of `master`.
void reseed(ExperimentConfig& config, std::uint64_t master);

struct ConfigKey {
  std::string path;
  std::string default_value;
  /// Empty when the desk default is the full-scale value.
  std::string paper_value;
  std::string help;
};
std::vector<ConfigKey> config_keys();

}  // namespace lffs
