#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixline/cql.hpp"
#include "mixline/env_bimanual.hpp"
#include "mixline/ppo.hpp"

namespace mixline::harness {

// Offline CQL run settings beyond the algorithm config itself.
struct OfflineConfig {
  std::vector<int> hidden = {64, 64};
  std::uint64_t grad_steps = 50'000;
  std::uint64_t eval_every = 5'000;
  int eval_episodes = 10;
  int conserve_probe = 4096;
  // Evaluation environment for bimanual datasets: 0 = whole task, 1..3 = that
  // stage. Bench datasets evaluate on their own env regardless.
  int eval_stage = 0;
  std::string dataset;  // input path; empty = <out>/whole_task.mxds
};

struct CollectConfig {
  int episodes = 200;
  bool success_only = true;
  int retry_multiple = 20;  // success_only gives up after retry_multiple * episodes
};

struct ComposeConfig {
  int episodes = 120;
  std::vector<int> step_caps = {300, 200, 200};
  std::vector<bool> success_required = {true, true, true};
  double step_cost = 0.01;
  double stage_bonus = 10.0;
  double shaped_scale = 0.1;
};

struct AblateConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  // Exactly two arms, each "ppo" or "cql_ppo". Equal arms are allowed and act
  // as a wiring check: identical algorithms must give identical curves.
  std::vector<std::string> algos = {"ppo", "cql_ppo"};
};

// One config file drives every subcommand; unused sections are ignored by the
// commands that do not need them. Defaults here are the documented defaults
// echoed into configs/default.json.
struct RunConfig {
  std::string experiment = "default";
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  // "bimanual" (stage picked by `stage`), "stage1_task" (alias for bimanual
  // stage 1, the ablation task), "pendulum_swingup", or "planar_reach".
  std::string env_name = "bimanual";
  int stage = 1;            // bimanual stage; 0 = whole task (eval only)
  std::string checkpoint;   // policy checkpoint for eval / collect
  int eval_episodes = 50;

  env::EnvConfig env;
  rl::PpoConfig ppo;
  rl::CqlConfig cql;
  OfflineConfig offline;
  CollectConfig collect;
  ComposeConfig compose;
  AblateConfig ablate;
};

bool is_bimanual(const std::string& env_name);
// stage1_task pins stage 1; otherwise cfg.stage.
int effective_stage(const RunConfig& cfg);

// Strict decode: unknown keys anywhere are a ConfigError, missing keys keep
// their defaults. The env section goes through env_config_from_json.
RunConfig run_config_from_json(const std::string& text);

// Full echo, every field present, fixed key order; parses back to an equal
// config. Ends with a newline.
std::string run_config_to_json(const RunConfig& cfg);

// Environment overrides: MIXLINE_<PATH> with "__" separating path segments,
// e.g. MIXLINE_SEED=3 or MIXLINE_PPO__TOTAL_ENV_STEPS=200000. Segments are
// lowercased; values parse as JSON fragments, falling back to plain strings.
// Unknown paths fail later in the strict decode.
std::vector<std::pair<std::string, std::string>> env_overrides();
void apply_overrides(std::string& json_text,
                     const std::vector<std::pair<std::string, std::string>>& overrides);

// Reads the file (empty path = all defaults), applies the process environment
// overrides, and decodes strictly. Missing file is a ConfigError.
RunConfig load_run_config(const std::string& path);

// Range checks across all sections; throws ConfigError. Runs after CLI flag
// merging so flag values are covered too.
void validate_run_config(const RunConfig& cfg);

}  // namespace mixline::harness
