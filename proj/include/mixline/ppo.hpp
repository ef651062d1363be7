#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mixline/env.hpp"
#include "mixline/gaussian.hpp"
#include "mixline/mlp.hpp"
#include "mixline/rng.hpp"

namespace mixline::rl {

using env::VecEnv;
using nn::MlpGrads;
using nn::MlpParams;

// ---------------------------------------------------------------------------
// Wait-training phases: during early curriculum phases one arm is locked.
// Locking is entirely the trainer's business — the env never sees it. Locked
// action dims are forced to zero in the env action and excluded from the
// policy's log-probs, KL and gradients.

enum class WaitPhase { kLockRight, kLockLeft, kBoth };

std::string wait_phase_name(WaitPhase phase);
WaitPhase wait_phase_from_name(const std::string& name);

// Locked dims are the right half of the action vector for kLockRight, the
// left half for kLockLeft, none for kBoth.
std::vector<int> locked_dims(WaitPhase phase, int action_dim);
std::vector<int> free_dims(WaitPhase phase, int action_dim);
// Zeroes locked dims in place; idempotent.
void apply_wait_mask(Vec& action, WaitPhase phase);

// ---------------------------------------------------------------------------
// Policy / value nets

// Policy net outputs [means, raw log-stds]. The log-std half of the output
// layer has zero weights and is kept zero by masking its gradient rows, so
// log-std is a state-independent trainable bias.
MlpParams make_policy_net(int obs_dim, int action_dim, const std::vector<int>& hidden,
                          RngStream rng, double init_log_std = -0.5, double final_scale = 0.01);
MlpParams make_value_net(int obs_dim, const std::vector<int>& hidden, RngStream rng);

// Zeroes the final-layer weight-row gradients of the log-std outputs (the
// bias stays trainable).
void mask_log_std_rows(MlpGrads& grads, int action_dim);

// Stochastic action from the policy (noise = one normal draw per action dim);
// pass nullptr for the deterministic tanh(mean) action.
Vec policy_action(const MlpParams& policy, const Vec& obs, RngStream* noise);

// ---------------------------------------------------------------------------
// GAE

// Single-env sequence. dones[t] cuts the bootstrap chain after step t; the
// bootstrap value stands in for V(s_T) when the last step did not terminate.
void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const std::uint8_t> dones, double bootstrap, double gamma,
                 double lambda, std::span<double> advantages_out);

// ---------------------------------------------------------------------------
// Rollout storage. Samples are env-major: index = env * horizon + t.

struct RolloutBatch {
  Matrix obs;          // B x obs_dim
  Matrix pre_squash;   // B x d, the z that generated each action
  Matrix actions;      // B x d, post-mask env actions
  Matrix old_mean;     // B x d, behaviour-policy head at collection time
  Matrix old_log_std;  // B x d
  Vec old_log_probs;   // over free dims only
  Vec rewards, values, advantages, returns;
  std::vector<std::uint8_t> dones;
  WaitPhase phase = WaitPhase::kBoth;
  int num_envs = 0;
  int horizon = 0;

  int size() const { return obs.rows; }
  int action_dim() const { return pre_squash.cols; }
};

// Collects num_envs x horizon steps, continuing whatever episodes the VecEnv
// has in flight. obs_rows holds the current observation per env and is
// updated in place. Noise draws: per step, per env, action_dim normals.
RolloutBatch collect_rollout(VecEnv& envs, const MlpParams& policy, const MlpParams& value,
                             int horizon, WaitPhase phase, RngStream& noise,
                             std::vector<Vec>& obs_rows);

// Fills advantages/returns (GAE per env, then returns = adv + values).
void finish_rollout(RolloutBatch& batch, const MlpParams& value,
                    const std::vector<Vec>& bootstrap_obs, double gamma, double lambda);

// In-place batch-wide advantage normalization to zero mean / unit std.
void normalize_advantages(Vec& advantages);

// ---------------------------------------------------------------------------
// PPO objective

struct PpoLossConfig {
  bool use_clip = true;     // false: KL-penalty objective
  double clip_eps = 0.2;
  double kl_beta = 1.0;     // penalty mode only
  double entropy_coef = 0.0;
  std::vector<int> free;    // free action dims, ascending
};

struct PpoLossStats {
  double loss = 0.0;
  double mean_kl = 0.0;        // closed-form KL(old || new), reported in both modes
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;  // clip mode only
  double mean_entropy = 0.0;
  double max_ratio_dev = 0.0;  // max |ratio - 1| over the minibatch
  double max_kl = 0.0;
};

// Mean loss over the given sample indices; when grads is non-null the
// analytic parameter gradient is accumulated (caller applies
// mask_log_std_rows before the optimizer step).
PpoLossStats ppo_policy_loss(const MlpParams& policy, const RolloutBatch& batch,
                             std::span<const std::size_t> indices, const PpoLossConfig& cfg,
                             MlpGrads* grads);

// 0.5 * mean squared error of V(s) against the GAE returns.
double value_loss(const MlpParams& value, const RolloutBatch& batch,
                  std::span<const std::size_t> indices, MlpGrads* grads);

// Doubles / halves beta when the observed KL leaves [target/1.5, 1.5*target],
// clamped to [1e-4, 1e2].
double adapt_kl_beta(double beta, double observed_kl, double kl_target);

// ---------------------------------------------------------------------------
// Curriculum

// Fixed-size success window over finished episodes of the current phase.
class SuccessWindow {
 public:
  explicit SuccessWindow(int capacity = 100) : capacity_(capacity) {}
  void push(bool success);
  void clear();
  bool full() const { return count_ == capacity_; }
  int count() const { return count_; }
  double rate() const;  // over the stored episodes; 0 when empty

 private:
  int capacity_;
  int count_ = 0;
  int head_ = 0;
  std::vector<std::uint8_t> ring_;
};

// True when the phase is done: the window is full and the success rate has
// reached the threshold.
bool should_advance(const SuccessWindow& window, double threshold);

// ---------------------------------------------------------------------------
// Stage training

struct PpoConfig {
  int num_envs = 16;
  int horizon = 128;
  int epochs = 4;
  int minibatch = 256;
  double lr = 3e-4;
  double gamma = 0.99;
  double lambda = 0.95;
  bool use_clip = true;
  double clip_eps = 0.2;
  double kl_target = 0.01;
  double beta0 = 1.0;
  double entropy_coef = 0.0;
  bool normalize_advantages = true;
  std::vector<int> hidden = {64, 64};
  double init_log_std = -0.5;
  double final_scale = 0.01;
  std::uint64_t total_env_steps = 1'000'000;
  std::vector<WaitPhase> schedule = {WaitPhase::kBoth};
  double advance_threshold = 0.8;
  int advance_window = 100;
  // Stop once the final phase sustains this success rate over a full window;
  // negative disables early stopping.
  double early_stop_success = -1.0;
  int checkpoint_every = 0;  // iterations; 0 = never (final nets returned anyway)
};

struct TrainIterationRow {
  int iteration = 0;
  std::uint64_t env_steps = 0;
  double mean_return = 0.0;   // over the episode window; NaN until one finishes
  double success_rate = 0.0;  // likewise
  double kl = 0.0;
  double beta = 0.0;
  std::string phase;
};

struct TrainHooks {
  std::function<void(const TrainIterationRow&)> on_metrics;
  std::function<void(const MlpParams& policy, const MlpParams& value, int iteration)>
      on_checkpoint;
};

struct TrainStageResult {
  MlpParams policy;
  MlpParams value;
  std::vector<TrainIterationRow> rows;
  std::uint64_t env_steps = 0;
  int iterations = 0;
  std::size_t phase_index = 0;  // into schedule; == schedule.size()-1 when finished
  double final_success_rate = 0.0;
  bool early_stopped = false;
  // Diagnostics from the very first optimizer pass: before any update the
  // importance ratios must be exactly 1 and the KL exactly 0.
  double first_epoch_max_ratio_dev = 0.0;
  double first_epoch_max_kl = 0.0;
};

// Online PPO over the given vectorized env, with the wait-training schedule.
// Nets warm-start across phases. Deterministic given (envs seeding, seed).
TrainStageResult train_stage(VecEnv& envs, const PpoConfig& cfg, std::uint64_t seed,
                             const TrainHooks& hooks = {});

}  // namespace mixline::rl
