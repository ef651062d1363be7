#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mixline/env_bimanual.hpp"
#include "mixline/linalg.hpp"
#include "mixline/mlp.hpp"

namespace mixline::data {

// ---------------------------------------------------------------------------
// Trajectories

// One episode as parallel arrays over T transitions. step_index is implicit:
// row t IS step t. episode_return must equal the left-to-right sum of rewards.
struct Trajectory {
  Matrix obs;                          // T x obs_dim
  Matrix actions;                      // T x action_dim
  Vec rewards;                         // T
  Matrix next_obs;                     // T x obs_dim
  std::vector<std::uint8_t> dones;     // T; exactly the last entry is 1
  std::vector<std::int32_t> stage_ids; // T; non-decreasing
  double episode_return = 0.0;
  bool success = false;
  std::uint64_t seed = 0;
  Vec orig_rewards;                    // side channel, filled by relabel_rewards

  int length() const { return obs.rows; }
};

// Throws ConfigError when the invariants do not hold: matching lengths,
// next_obs[t] == obs[t+1] bitwise, done only on the final transition,
// non-decreasing stage ids, finite rewards summing to episode_return.
void validate_trajectory(const Trajectory& t);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetHeader {
  std::uint32_t format_version = 1;
  std::string env_name;
  std::uint64_t env_digest = 0;
  int obs_dim = 0;
  int action_dim = 0;
  env::ObservationLayout obs_layout;
  std::string created;  // free-form provenance; no wall-clock for determinism
  std::uint64_t trajectory_count = 0;
  std::uint64_t transition_count = 0;
};

// Headers for the two environment families. `created` comes from the caller.
DatasetHeader make_bimanual_header(const env::EnvConfig& cfg, std::string created);
DatasetHeader make_bench_header(const std::string& env_name, int obs_dim, int action_dim,
                                std::string created);

class OfflineDataset {
 public:
  OfflineDataset() = default;
  OfflineDataset(DatasetHeader header, std::vector<Trajectory> trajectories);

  const DatasetHeader& header() const { return header_; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  std::uint64_t transition_count() const { return index_.empty() ? 0 : index_.back(); }

  // Flat transition view; i < transition_count().
  struct TransitionRef {
    std::span<const double> obs;
    std::span<const double> action;
    double reward = 0.0;
    std::span<const double> next_obs;
    bool done = false;
    std::int32_t stage_id = 0;
  };
  TransitionRef transition(std::uint64_t i) const;

  double mean_episode_return() const;

 private:
  DatasetHeader header_;
  std::vector<Trajectory> trajectories_;
  std::vector<std::uint64_t> index_;  // prefix sums of trajectory lengths
};

// Sectioned little-endian file ("MXDS"): JSON header section, binary
// trajectory table, binary payload; each section carries a CRC-64. Writing
// validates every trajectory and fills the header counts.
void write_dataset(const std::vector<Trajectory>& trajectories, DatasetHeader header,
                   const std::string& path);
OfflineDataset read_dataset(const std::string& path);

// Concatenation in argument order. Headers must agree on env identity
// (name, digest, dims, layout); counts are recomputed, `created` is taken
// from the first part.
OfflineDataset merge_datasets(const std::vector<const OfflineDataset*>& parts);

// ---------------------------------------------------------------------------
// Collection

struct CollectOptions {
  bool success_only = false;
  int stage_id = 1;        // recorded on every transition
  int retry_multiple = 20; // success_only gives up after retry_multiple * episodes
};

// Runs the policy in deterministic mode for `episodes` episodes. Episode k
// reseeds the env from split("episode", k) of `seed`, so results depend only
// on (policy, env construction, seed).
std::vector<Trajectory> collect(env::RlEnv& env, const nn::MlpParams& policy, int episodes,
                                std::uint64_t seed, const CollectOptions& opts = {});

// ---------------------------------------------------------------------------
// Whole-task composition

// Controller for one stage: observation -> action (world state available for
// scripted controllers; learned policies ignore it).
using StageController = std::function<Vec(const env::WorldState&, const Vec&)>;

struct ComposeSpec {
  std::vector<std::string> checkpoints;    // stage k policy at index k-1
  std::vector<int> step_caps{300, 200, 200};
  std::vector<bool> success_required{true, true, true};
  double step_cost = 0.01;
  double stage_bonus = 10.0;
  double shaped_scale = 0.1;
};

// Runs stage controllers back to back on one live world per episode,
// switching controller (never resetting) when the active stage's success
// predicate fires; stages mirror WholeTaskEnv's bookkeeping so composed
// trajectories match its episode semantics. Episodes where a required stage
// exhausts its cap (or an object falls) are discarded; rewards recorded are
// the per-stage shaped rewards. Throws CompositionError when nothing survives.
std::vector<Trajectory> compose_long_horizon(const ComposeSpec& spec,
                                             const std::vector<StageController>& controllers,
                                             const env::EnvConfig& cfg, int episodes,
                                             std::uint64_t seed);

// Loads the spec's checkpoints as deterministic policies and composes.
std::vector<Trajectory> compose_long_horizon(const ComposeSpec& spec,
                                             const env::EnvConfig& cfg, int episodes,
                                             std::uint64_t seed);

// Whole-task reward relabeling: reward_t = -step_cost + shaped_scale * orig_t,
// plus stage_bonus where a stage completes (stage_id increases next step, or
// the final transition of a successful trajectory). Originals move to the
// orig_rewards side channel; episode_return is recomputed.
Trajectory relabel_rewards(Trajectory t, const ComposeSpec& spec);

}  // namespace mixline::data
