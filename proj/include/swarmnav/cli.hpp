#pragma once

#include "swarmnav/rl.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace swarmnav {

/// Bad configuration text, key or value. what() carries the source line when known.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct EvalSettings {
  int trials = 20;
  std::string controller = "baseline";  // baseline | hover | policy
  std::string checkpoint;               // required by "policy"
  bool deterministic = true;            // policy mean instead of samples
  std::string trajectories = "jsonl";   // jsonl | binary | none
};

struct AblateSettings {
  std::vector<std::string> configs = {"proposed", "no_flocking"};
};

struct InspectSettings {
  int frames = 10;
};

/// Everything one CLI run needs. Every field has a default; the TOML layout mirrors the sections.
struct RunConfig {
  std::string mode = "train";  // train | eval | ablate | export | inspect-perception
  std::uint64_t seed = 1;
  bool single_thread = false;
  int threads = 0;  // 0: hardware concurrency
  std::string out = "runs/latest";

  EnvConfig env;
  std::string network = "desk";
  PpoHyperparams hp = desk_hyperparams();
  long long total_timesteps = 300000;
  double log_std_init = -0.5;
  int checkpoint_every = 0;

  EvalSettings eval;
  AblateSettings ablate;
  InspectSettings inspect;

  static PpoHyperparams desk_hyperparams() {
    PpoHyperparams hp;
    hp.minibatch = 512;
    return hp;
  }
  void validate() const;
  int worker_threads() const;
  /// Environment as a command sees it: uav radius shared with the reward, given episode mode.
  EnvConfig env_config(EpisodeMode mode) const;
  TrainConfig train_config() const;
};

RunConfig parse_run_config(std::string_view text, std::string_view source = "<config>");
RunConfig load_run_config(const std::string& path);
/// Canonical TOML; parse(to_toml(c)) == c field by field.
std::string to_toml(const RunConfig& config);

/// Looks up SWARMNAV_<SECTION>_<KEY> for every key (upper case) and applies the values found.
using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
void apply_env_overrides(RunConfig& config, const EnvLookup& lookup);
std::optional<std::string> process_env(const std::string& name);

/// proposed, no_flocking, no_obstacle, no_stable, no_perception, uniform_weights.
RewardToggles ablation_toggles(const std::string& name);
const std::vector<std::string>& ablation_names();

/// Per UAV and frame: raw returns, gated and filtered sets, clusters, tracks, validated neighbours.
void write_perception_dump(std::ostream& out, const EnvConfig& config, std::uint64_t seed, int frames);
void write_policy_json(std::ostream& out, const PolicyNetwork& net);
void write_scenario_json(std::ostream& out, const Scenario& scenario);

/// The swarmnav command line. Exit codes: 0 ok, 2 config error, 3 artifact or IO error, 4 runtime fault.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const EnvLookup& lookup = process_env);

}  // namespace swarmnav
