#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mixline/dataset.hpp"
#include "mixline/env.hpp"
#include "mixline/mlp.hpp"
#include "mixline/ppo.hpp"
#include "mixline/rng.hpp"

namespace mixline::rl {

// ---------------------------------------------------------------------------
// SAC learner state: tanh-Gaussian actor with state-dependent log-stds, twin
// Q critics with polyak-averaged targets, and a log-parameterized entropy
// temperature (alpha_ent = exp(log_alpha) stays positive by construction).

struct SacState {
  nn::MlpParams policy;                // obs -> [means, raw log-stds]
  nn::MlpParams q1, q2;                // [obs, action] -> scalar
  nn::MlpParams q1_target, q2_target;  // start as exact copies of the live nets
  double log_alpha = 0.0;
  double target_entropy = 0.0;

  double alpha_ent() const;
  int obs_dim() const { return policy.input_dim(); }
  int action_dim() const { return policy.output_dim() / 2; }
};

// target_entropy defaults to -action_dim.
SacState make_sac_state(int obs_dim, int action_dim, const std::vector<int>& hidden,
                        RngStream rng);

// ---------------------------------------------------------------------------
// Config

// Proposal distribution for the regularizer's sampled actions.
enum class MuMode { kCurrentPolicy, kUniformMix };

std::string mu_mode_name(MuMode mode);
MuMode mu_mode_from_name(const std::string& name);

struct CqlConfig {
  double alpha_cql = 5.0;        // >= 0; 0 recovers plain SAC
  int num_sampled_actions = 10;  // K >= 1
  MuMode mu_mode = MuMode::kUniformMix;
  double gamma = 0.99;
  double polyak_tau = 0.005;
  double lr_policy = 3e-4;
  double lr_critic = 3e-4;
  double lr_alpha = 3e-4;
  int batch_size = 256;
};

// Throws ConfigError on out-of-range fields (alpha_cql < 0, K < 1, gamma
// outside [0,1], tau outside (0,1], non-positive lrs or batch size).
void validate(const CqlConfig& cfg);

// ---------------------------------------------------------------------------
// Minibatches

struct QBatch {
  Matrix states;       // B x obs_dim
  Matrix actions;      // B x action_dim
  Vec rewards;         // B
  Matrix next_states;  // B x obs_dim
  std::vector<std::uint8_t> done_flags;  // B

  int size() const { return states.rows; }
};

// Uniform i.i.d. transition draws with replacement, one uniform_index per row.
QBatch sample_qbatch(const data::OfflineDataset& ds, int batch_size, RngStream& rng);

// ---------------------------------------------------------------------------
// Critic targets

// y_i = r_i + gamma * (1 - done_i) * (min(Q1',Q2')(s'_i,a'_i) - alpha_ent * log pi(a'_i|s'_i))
// with a' sampled from the current policy at s' (d normals per row, row-major).
// No gradient flows through y; done rows give y == r bitwise.
Vec bellman_target(const QBatch& batch, const SacState& sac, double gamma, RngStream& rng);

// ---------------------------------------------------------------------------
// CQL regularizer

// K actions per state plus the log-density of each under the distribution it
// was drawn from. Row i*K + k holds proposal k for state i; with kUniformMix
// the first K/2 rows per state are uniform draws, the rest policy samples.
struct MuSamples {
  Matrix actions;
  Vec log_proposal;
  int per_state = 0;
};

MuSamples draw_mu_samples(const nn::MlpParams& policy, const Matrix& states,
                          const CqlConfig& cfg, RngStream& rng);

// Self-normalized importance-weighted soft maximum over one state's samples:
// logsumexp_k(q[k] + w[k]) - logsumexp_k(w[k]) with w = -log proposal density.
// Constant w reduces it to logsumexp(q) - log K.
double weighted_logmeanexp(std::span<const double> q, std::span<const double> w);

struct CqlRegStats {
  double value = 0.0;          // alpha_cql * mean_gap
  double mean_gap = 0.0;       // mean_i [soft-max over proposals - Q(s_i, dataset a_i)]
  double mean_dataset_q = 0.0;
};

// Regularizer at pre-drawn proposals; accumulates critic grads when non-null.
// The gap is computed on Q differences against the dataset action, so a Q net
// that ignores the action gives exactly 0. alpha_cql == 0 skips the sampled
// forward pass entirely and returns exactly 0 without touching grads.
// dataset_q_out, when non-null, receives Q(s_i, dataset a_i) per row.
CqlRegStats cql_regularizer_at(const nn::MlpParams& q, const Matrix& states,
                               const Matrix& dataset_actions, const MuSamples& mu,
                               double alpha_cql, nn::MlpGrads* grads,
                               Vec* dataset_q_out = nullptr);

// Draws K proposals per state and evaluates.
CqlRegStats cql_regularizer(const nn::MlpParams& q, const QBatch& batch,
                            const nn::MlpParams& policy, const CqlConfig& cfg, RngStream& rng,
                            nn::MlpGrads* grads = nullptr);

// ---------------------------------------------------------------------------
// Loss pieces shared by the SAC and PPO couplings

// 0.5 * mean_i (Q(s_i, a_i) - y_i)^2; accumulates critic grads when non-null.
double q_regression_loss(const nn::MlpParams& q, const Matrix& states, const Matrix& actions,
                         const Vec& targets, nn::MlpGrads* grads);

// Reparameterized actor loss mean_i [alpha_ent * log pi(a~_i|s_i) - min(Q1,Q2)(s_i,a~_i)]
// with a~ = tanh(mean + std * noise); accumulates policy grads when non-null
// (critics are fixed inputs). mean_log_pi_out feeds the temperature step.
double sac_policy_loss(const nn::MlpParams& policy, const nn::MlpParams& q1,
                       const nn::MlpParams& q2, const Matrix& states, const Matrix& noise,
                       double alpha_ent, nn::MlpGrads* grads,
                       double* mean_log_pi_out = nullptr);

// target = (1 - tau) * target + tau * live, coordinate-wise (weights/biases
// only; optimizer moments are left alone).
void polyak_update(nn::MlpParams& target, const nn::MlpParams& live, double tau);

// ---------------------------------------------------------------------------
// One CQL-SAC update

struct SacUpdateStats {
  double bellman_loss = 0.0;    // averaged over the two critics
  double cql_reg = 0.0;         // likewise (both critics score the same proposals)
  double mean_dataset_q = 0.0;  // mean_i min(Q1,Q2)(s_i, a_i) before the critic step
  double policy_loss = 0.0;
  double mean_log_pi = 0.0;
  double alpha_ent = 0.0;       // after the temperature step
};

// Pinned order: bellman targets, proposal draws, q1 step, q2 step (same
// proposals), policy step against the updated critics, temperature step,
// polyak on both targets. Each critic's loss is the regularizer plus the
// squared Bellman error; with alpha_cql == 0 the critic updates are
// bit-for-bit plain SAC.
SacUpdateStats cql_sac_update(SacState& sac, const QBatch& batch, const CqlConfig& cfg,
                              RngStream& rng);

// ---------------------------------------------------------------------------
// Offline training

struct OfflineRow {
  std::uint64_t grad_step = 0;
  double mean_return = 0.0;     // deterministic eval rollouts; NaN without an eval env
  double success_rate = 0.0;
  double mean_dataset_q = 0.0;  // min-critic over the fixed probe transitions
  double mean_mc_return = 0.0;  // discounted return-to-go over the same probe
  double bellman_loss = 0.0;    // running means since the previous row
  double cql_reg = 0.0;
  double policy_loss = 0.0;
  double alpha_ent = 0.0;
};

struct OfflineTrainConfig {
  CqlConfig cql;
  std::vector<int> hidden = {64, 64};
  std::uint64_t grad_steps = 50'000;
  std::uint64_t eval_every = 5'000;  // row cadence; the final step always emits a row
  int eval_episodes = 10;
  int conserve_probe = 4096;  // transitions probed for the conservatism columns
};

struct OfflineHooks {
  std::function<void(const OfflineRow&)> on_metrics;
};

struct OfflineTrainResult {
  SacState sac;
  std::vector<OfflineRow> rows;
  std::uint64_t grad_steps = 0;
  // Whole-dataset conservatism check: mean min-critic Q over every stored
  // (s, a) versus the mean empirical discounted return-to-go.
  double final_mean_dataset_q = 0.0;
  double final_mean_mc_return = 0.0;
};

// Discounted return-to-go of every transition, trajectory-major (same flat
// order as OfflineDataset::transition).
Vec dataset_mc_returns(const data::OfflineDataset& ds, double gamma);

// Mean of min(Q1,Q2) over every stored (state, action) pair.
double dataset_mean_q(const SacState& sac, const data::OfflineDataset& ds);

// Seeded offline CQL over i.i.d. minibatches. eval_env is reseeded per eval
// episode and driven by the deterministic policy; pass nullptr to skip
// rollouts (return/success columns become NaN). Throws ConfigError when the
// dataset is empty or its dims do not match eval_env. grad_steps == 0 returns
// the freshly initialized state and no rows.
OfflineTrainResult train_offline(const data::OfflineDataset& ds, const OfflineTrainConfig& cfg,
                                 std::uint64_t seed, env::RlEnv* eval_env,
                                 const OfflineHooks& hooks = {});

// ---------------------------------------------------------------------------
// On-policy coupling: a Q critic regularized on rollout data drives PPO
// advantages. The rollout's stored actions play the dataset role and the
// proposals always come from the current policy.

// A_i = Q(s_i, a_i) - mean_k Q(s_i, a~_k) with K policy samples per state.
Vec q_advantages(const nn::MlpParams& q, const RolloutBatch& batch,
                 const nn::MlpParams& policy, int num_samples, RngStream& rng);

// Critic loss on rollout rows idx: 0.5 * mean (Q(s,a) - returns)^2 plus the
// regularizer (kCurrentPolicy proposals regardless of cfg.mu_mode). With
// alpha_cql == 0 this is bit-for-bit the plain regression toward the stored
// returns.
double cql_ppo_critic_loss(const nn::MlpParams& q, const RolloutBatch& batch,
                           std::span<const std::size_t> idx, const nn::MlpParams& policy,
                           const CqlConfig& cfg, RngStream& rng, nn::MlpGrads* grads);

struct CqlPpoStats {
  double critic_loss = 0.0;  // full-batch evaluation after the critic epochs
  double cql_reg = 0.0;      // likewise, regularizer term alone
  PpoLossStats policy;       // full-batch evaluation after the policy epochs
};

// One training iteration on a collected batch, pinned order: critic epochs
// (minibatch TD regression toward the stored returns + regularizer), Q-based
// advantages on the full batch (normalized per ppo_cfg), then the standard
// PPO policy epochs on those advantages. Deterministic given (inputs, seed).
CqlPpoStats cql_ppo_update(const RolloutBatch& batch, nn::MlpParams& q, nn::MlpParams& policy,
                           const PpoConfig& ppo_cfg, const CqlConfig& cql_cfg,
                           std::uint64_t seed);

struct CqlPpoTrainResult {
  nn::MlpParams policy;
  nn::MlpParams value;
  nn::MlpParams q;
  std::vector<TrainIterationRow> rows;
  std::uint64_t env_steps = 0;
  int iterations = 0;
};

// Online loop mirroring train_stage (same rollout collection, value-net GAE
// returns, metrics rows and early stop) with the policy/critic updates
// replaced by cql_ppo_update. The value net only supplies the regression
// targets. Wait-phase schedules are not supported here: the whole action
// vector stays live.
CqlPpoTrainResult train_stage_cqlppo(env::VecEnv& envs, const PpoConfig& ppo_cfg,
                                     const CqlConfig& cql_cfg, std::uint64_t seed,
                                     const TrainHooks& hooks = {});

}  // namespace mixline::rl
