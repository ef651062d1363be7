#include "mixline/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "mixline/errors.hpp"

namespace mixline::rl {

using nn::GaussianHead;
using nn::gaussian_kl;
using nn::gaussian_log_prob_z;
using nn::head_from_output;

// ---------------------------------------------------------------------------
// Wait phases

std::string wait_phase_name(WaitPhase phase) {
  switch (phase) {
    case WaitPhase::kLockRight: return "lock_right";
    case WaitPhase::kLockLeft: return "lock_left";
    case WaitPhase::kBoth: return "both";
  }
  throw ConfigError("wait_phase_name: bad phase");
}

WaitPhase wait_phase_from_name(const std::string& name) {
  if (name == "lock_right") return WaitPhase::kLockRight;
  if (name == "lock_left") return WaitPhase::kLockLeft;
  if (name == "both") return WaitPhase::kBoth;
  throw ConfigError("unknown wait phase: " + name);
}

std::vector<int> locked_dims(WaitPhase phase, int action_dim) {
  const int half = action_dim / 2;
  std::vector<int> dims;
  if (phase == WaitPhase::kLockRight)
    for (int i = half; i < action_dim; ++i) dims.push_back(i);
  if (phase == WaitPhase::kLockLeft)
    for (int i = 0; i < half; ++i) dims.push_back(i);
  return dims;
}

std::vector<int> free_dims(WaitPhase phase, int action_dim) {
  const auto locked = locked_dims(phase, action_dim);
  std::vector<int> dims;
  for (int i = 0; i < action_dim; ++i)
    if (std::find(locked.begin(), locked.end(), i) == locked.end()) dims.push_back(i);
  return dims;
}

void apply_wait_mask(Vec& action, WaitPhase phase) {
  for (int i : locked_dims(phase, static_cast<int>(action.size()))) action[i] = 0.0;
}

// ---------------------------------------------------------------------------
// Nets

MlpParams make_policy_net(int obs_dim, int action_dim, const std::vector<int>& hidden,
                          RngStream rng, double init_log_std, double final_scale) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2 * action_dim);
  MlpParams net = nn::mlp_init(sizes, rng, final_scale);
  // State-independent log-std: zero weights, trainable bias.
  Matrix& w = net.weights.back();
  Vec& b = net.biases.back();
  for (int o = action_dim; o < 2 * action_dim; ++o) {
    for (int i = 0; i < w.cols; ++i) w.at(o, i) = 0.0;
    b[o] = init_log_std;
  }
  return net;
}

MlpParams make_value_net(int obs_dim, const std::vector<int>& hidden, RngStream rng) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return nn::mlp_init(sizes, rng, 1.0);
}

void mask_log_std_rows(MlpGrads& grads, int action_dim) {
  Matrix& dw = grads.dw.back();
  for (int o = action_dim; o < 2 * action_dim; ++o)
    for (int i = 0; i < dw.cols; ++i) dw.at(o, i) = 0.0;
}

Vec policy_action(const MlpParams& policy, const Vec& obs, RngStream* noise) {
  const GaussianHead head = head_from_output(nn::mlp_forward(policy, obs));
  if (noise == nullptr) return nn::deterministic_action(head);
  Vec n(head.mean.size());
  for (auto& v : n) v = noise->normal();
  return nn::gaussian_sample(head, n).action;
}

// ---------------------------------------------------------------------------
// GAE

void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const std::uint8_t> dones, double bootstrap, double gamma,
                 double lambda, std::span<double> advantages_out) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n || advantages_out.size() != n)
    throw ShapeError("compute_gae: length mismatch");
  double next_adv = 0.0;
  double next_value = bootstrap;
  for (std::size_t t = n; t-- > 0;) {
    const double nonterminal = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * nonterminal - values[t];
    next_adv = delta + gamma * lambda * nonterminal * next_adv;
    advantages_out[t] = next_adv;
    next_value = values[t];
  }
}

// ---------------------------------------------------------------------------
// Rollout collection

RolloutBatch collect_rollout(VecEnv& envs, const MlpParams& policy, const MlpParams& value,
                             int horizon, WaitPhase phase, RngStream& noise,
                             std::vector<Vec>& obs_rows) {
  const int n = envs.size();
  const int obs_dim = envs.obs_dim();
  const int d = envs.action_dim();
  const int b = n * horizon;

  RolloutBatch batch;
  batch.obs = Matrix(b, obs_dim);
  batch.pre_squash = Matrix(b, d);
  batch.actions = Matrix(b, d);
  batch.old_mean = Matrix(b, d);
  batch.old_log_std = Matrix(b, d);
  batch.old_log_probs.resize(b);
  batch.rewards.resize(b);
  batch.values.resize(b);
  batch.advantages.resize(b);
  batch.returns.resize(b);
  batch.dones.resize(b);
  batch.phase = phase;
  batch.num_envs = n;
  batch.horizon = horizon;

  const std::vector<int> free = free_dims(phase, d);
  Matrix step_obs(n, obs_dim);
  Vec noise_buf(d);

  for (int t = 0; t < horizon; ++t) {
    for (int i = 0; i < n; ++i)
      std::copy(obs_rows[i].begin(), obs_rows[i].end(), step_obs.row(i));
    const Matrix policy_out = nn::mlp_forward_batch(policy, step_obs);
    const Matrix value_out = nn::mlp_forward_batch(value, step_obs);

    for (int i = 0; i < n; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * horizon + t;
      const GaussianHead head =
          head_from_output(std::span<const double>(policy_out.row(i), 2 * d));
      for (int j = 0; j < d; ++j) noise_buf[j] = noise.normal();
      nn::GaussianSample sample = nn::gaussian_sample(head, noise_buf);
      Vec action = sample.action;
      apply_wait_mask(action, phase);

      std::copy(obs_rows[i].begin(), obs_rows[i].end(), batch.obs.row(row));
      std::copy(sample.pre_squash.begin(), sample.pre_squash.end(), batch.pre_squash.row(row));
      std::copy(action.begin(), action.end(), batch.actions.row(row));
      std::copy(head.mean.begin(), head.mean.end(), batch.old_mean.row(row));
      std::copy(head.log_std.begin(), head.log_std.end(), batch.old_log_std.row(row));
      batch.old_log_probs[row] = gaussian_log_prob_z(head, sample.pre_squash, &free);
      batch.values[row] = value_out.at(i, 0);

      const env::StepOut out = envs.step(static_cast<int>(i), action);
      batch.rewards[row] = out.reward;
      batch.dones[row] = out.done ? 1 : 0;
      obs_rows[i] = out.obs;
    }
  }
  return batch;
}

void finish_rollout(RolloutBatch& batch, const MlpParams& value,
                    const std::vector<Vec>& bootstrap_obs, double gamma, double lambda) {
  const int n = batch.num_envs;
  const int t = batch.horizon;
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * t;
    const double bootstrap = nn::mlp_forward(value, bootstrap_obs[i])[0];
    compute_gae(std::span<const double>(batch.rewards.data() + base, t),
                std::span<const double>(batch.values.data() + base, t),
                std::span<const std::uint8_t>(batch.dones.data() + base, t), bootstrap, gamma,
                lambda, std::span<double>(batch.advantages.data() + base, t));
  }
  for (std::size_t k = 0; k < batch.returns.size(); ++k)
    batch.returns[k] = batch.advantages[k] + batch.values[k];
}

void normalize_advantages(Vec& advantages) {
  if (advantages.empty()) return;
  const double n = static_cast<double>(advantages.size());
  double mean = 0.0;
  for (double a : advantages) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : advantages) var += (a - mean) * (a - mean);
  const double std = std::sqrt(var / n);
  for (double& a : advantages) a = (a - mean) / (std + 1e-8);
}

// ---------------------------------------------------------------------------
// PPO objective

PpoLossStats ppo_policy_loss(const MlpParams& policy, const RolloutBatch& batch,
                             std::span<const std::size_t> indices, const PpoLossConfig& cfg,
                             MlpGrads* grads) {
  const int d = batch.action_dim();
  const int m = static_cast<int>(indices.size());
  if (m == 0) throw ShapeError("ppo_policy_loss: empty minibatch");
  const double inv_m = 1.0 / m;

  Matrix mb_obs(m, batch.obs.cols);
  for (int r = 0; r < m; ++r)
    std::copy(batch.obs.row(static_cast<int>(indices[r])),
              batch.obs.row(static_cast<int>(indices[r])) + batch.obs.cols, mb_obs.row(r));

  nn::MlpCache cache;
  const Matrix out = nn::mlp_forward_batch(policy, mb_obs, grads ? &cache : nullptr);
  Matrix upstream(m, 2 * d);

  PpoLossStats stats;
  const double log_two_pi_e = 1.8378770664093454835606594728112 + 1.0;

  for (int r = 0; r < m; ++r) {
    const int row = static_cast<int>(indices[r]);
    const GaussianHead head = head_from_output(std::span<const double>(out.row(r), 2 * d));
    GaussianHead old;
    old.mean.assign(batch.old_mean.row(row), batch.old_mean.row(row) + d);
    old.log_std.assign(batch.old_log_std.row(row), batch.old_log_std.row(row) + d);
    const std::span<const double> z(batch.pre_squash.row(row), d);

    const double lp_new = gaussian_log_prob_z(head, z, &cfg.free);
    const double kl = gaussian_kl(old, head, &cfg.free);
    const double adv = batch.advantages[row];
    const double delta_lp = lp_new - batch.old_log_probs[row];
    const bool saturated = std::abs(delta_lp) > 30.0;
    const double ratio = std::exp(std::clamp(delta_lp, -30.0, 30.0));

    double entropy = 0.0;
    for (int j : cfg.free) entropy += head.log_std[j] + 0.5 * log_two_pi_e;

    double term;
    double dterm_dlp;  // gradient of the per-sample loss through lp_new
    bool clipped = false;
    if (cfg.use_clip) {
      const double lo = 1.0 - cfg.clip_eps;
      const double hi = 1.0 + cfg.clip_eps;
      const double unclipped = ratio * adv;
      const double clamped = std::clamp(ratio, lo, hi) * adv;
      term = -std::min(unclipped, clamped);
      clipped = ratio < lo || ratio > hi;
      const bool active = adv >= 0.0 ? ratio <= hi : ratio >= lo;
      dterm_dlp = active && !saturated ? -adv * ratio : 0.0;
    } else {
      term = -ratio * adv + cfg.kl_beta * kl;
      dterm_dlp = saturated ? 0.0 : -adv * ratio;
    }
    term -= cfg.entropy_coef * entropy;

    stats.loss += term * inv_m;
    stats.mean_kl += kl * inv_m;
    stats.mean_ratio += ratio * inv_m;
    stats.mean_entropy += entropy * inv_m;
    if (clipped) stats.clip_fraction += inv_m;
    stats.max_ratio_dev = std::max(stats.max_ratio_dev, std::abs(ratio - 1.0));
    stats.max_kl = std::max(stats.max_kl, std::abs(kl));

    if (grads == nullptr) continue;
    for (int j : cfg.free) {
      const double sigma = std::exp(head.log_std[j]);
      const double u = (z[j] - head.mean[j]) / sigma;
      const double dlp_dmean = u / sigma;
      const double dlp_dlog_std = u * u - 1.0;

      double g_mean = dterm_dlp * dlp_dmean;
      double g_log_std = dterm_dlp * dlp_dlog_std - cfg.entropy_coef;
      if (!cfg.use_clip) {
        const double so = std::exp(old.log_std[j]);
        const double dm = old.mean[j] - head.mean[j];
        g_mean += cfg.kl_beta * (-dm / (sigma * sigma));
        g_log_std += cfg.kl_beta * (1.0 - (so * so + dm * dm) / (sigma * sigma));
      }
      // The raw net output is clamped into [kLogStdMin, kLogStdMax]; outside
      // that window the gradient dies at the clamp.
      const double raw = out.at(r, d + j);
      if (raw <= nn::kLogStdMin || raw >= nn::kLogStdMax) g_log_std = 0.0;
      upstream.at(r, j) = g_mean * inv_m;
      upstream.at(r, d + j) = g_log_std * inv_m;
    }
  }

  if (grads != nullptr) nn::mlp_backward_batch(policy, cache, upstream, *grads);
  return stats;
}

double value_loss(const MlpParams& value, const RolloutBatch& batch,
                  std::span<const std::size_t> indices, MlpGrads* grads) {
  const int m = static_cast<int>(indices.size());
  if (m == 0) throw ShapeError("value_loss: empty minibatch");
  const double inv_m = 1.0 / m;

  Matrix mb_obs(m, batch.obs.cols);
  for (int r = 0; r < m; ++r)
    std::copy(batch.obs.row(static_cast<int>(indices[r])),
              batch.obs.row(static_cast<int>(indices[r])) + batch.obs.cols, mb_obs.row(r));

  nn::MlpCache cache;
  const Matrix out = nn::mlp_forward_batch(value, mb_obs, grads ? &cache : nullptr);
  Matrix upstream(m, 1);
  double loss = 0.0;
  for (int r = 0; r < m; ++r) {
    const double err = out.at(r, 0) - batch.returns[indices[r]];
    loss += 0.5 * err * err * inv_m;
    upstream.at(r, 0) = err * inv_m;
  }
  if (grads != nullptr) nn::mlp_backward_batch(value, cache, upstream, *grads);
  return loss;
}

double adapt_kl_beta(double beta, double observed_kl, double kl_target) {
  if (observed_kl > 1.5 * kl_target)
    beta *= 2.0;
  else if (observed_kl < kl_target / 1.5)
    beta /= 2.0;
  return std::clamp(beta, 1e-4, 1e2);
}

// ---------------------------------------------------------------------------
// Curriculum

void SuccessWindow::push(bool success) {
  if (ring_.empty()) ring_.assign(capacity_, 0);
  ring_[head_] = success ? 1 : 0;
  head_ = (head_ + 1) % capacity_;
  if (count_ < capacity_) ++count_;
}

void SuccessWindow::clear() {
  count_ = 0;
  head_ = 0;
}

double SuccessWindow::rate() const {
  if (count_ == 0) return 0.0;
  int hits = 0;
  for (int i = 0; i < count_; ++i) hits += ring_[i] != 0;
  return static_cast<double>(hits) / count_;
}

bool should_advance(const SuccessWindow& window, double threshold) {
  return window.full() && window.rate() >= threshold;
}

// ---------------------------------------------------------------------------
// Stage training

namespace {

void fisher_yates(std::vector<std::size_t>& idx, RngStream& rng) {
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
}

}  // namespace

TrainStageResult train_stage(VecEnv& envs, const PpoConfig& cfg, std::uint64_t seed,
                             const TrainHooks& hooks) {
  if (cfg.schedule.empty()) throw ConfigError("train_stage: empty phase schedule");
  const int obs_dim = envs.obs_dim();
  const int d = envs.action_dim();
  const std::uint64_t steps_per_iter =
      static_cast<std::uint64_t>(cfg.num_envs) * static_cast<std::uint64_t>(cfg.horizon);
  if (envs.size() != cfg.num_envs) throw ConfigError("train_stage: env count mismatch");

  RngStream master(seed);
  TrainStageResult res;
  res.policy = make_policy_net(obs_dim, d, cfg.hidden, master.split("policy_init"),
                               cfg.init_log_std, cfg.final_scale);
  res.value = make_value_net(obs_dim, cfg.hidden, master.split("value_init"));
  RngStream noise = master.split("noise");
  RngStream shuffle = master.split("shuffle");

  MlpGrads pg, vg;
  pg.init_like(res.policy);
  vg.init_like(res.value);
  const nn::AdamConfig opt{.lr = cfg.lr};

  std::vector<Vec> obs_rows = envs.reset_all();
  envs.clear_finished();

  double beta = cfg.beta0;
  SuccessWindow window(cfg.advance_window);
  std::deque<double> return_window;

  const int iterations =
      static_cast<int>((cfg.total_env_steps + steps_per_iter - 1) / steps_per_iter);
  std::vector<std::size_t> indices;

  for (int iter = 1; iter <= iterations; ++iter) {
    const WaitPhase phase = cfg.schedule[res.phase_index];
    RolloutBatch batch =
        collect_rollout(envs, res.policy, res.value, cfg.horizon, phase, noise, obs_rows);
    res.env_steps += steps_per_iter;
    finish_rollout(batch, res.value, obs_rows, cfg.gamma, cfg.lambda);
    if (cfg.normalize_advantages) normalize_advantages(batch.advantages);

    PpoLossConfig lcfg;
    lcfg.use_clip = cfg.use_clip;
    lcfg.clip_eps = cfg.clip_eps;
    lcfg.kl_beta = beta;
    lcfg.entropy_coef = cfg.entropy_coef;
    lcfg.free = free_dims(phase, d);

    indices.resize(batch.size());
    std::iota(indices.begin(), indices.end(), 0);

    if (iter == 1) {
      // Before the first update the recomputed policy must agree with the
      // behaviour policy exactly: ratios 1, KL 0.
      const PpoLossStats probe = ppo_policy_loss(res.policy, batch, indices, lcfg, nullptr);
      res.first_epoch_max_ratio_dev = probe.max_ratio_dev;
      res.first_epoch_max_kl = probe.max_kl;
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      fisher_yates(indices, shuffle);
      for (std::size_t start = 0; start < indices.size();
           start += static_cast<std::size_t>(cfg.minibatch)) {
        const std::size_t len =
            std::min(static_cast<std::size_t>(cfg.minibatch), indices.size() - start);
        const std::span<const std::size_t> mb(indices.data() + start, len);
        pg.zero();
        const PpoLossStats stats = ppo_policy_loss(res.policy, batch, mb, lcfg, &pg);
        if (!std::isfinite(stats.loss)) throw NumericError("ppo: non-finite policy loss");
        mask_log_std_rows(pg, d);
        nn::adam_step(res.policy, pg, opt);
        vg.zero();
        const double vloss = value_loss(res.value, batch, mb, &vg);
        if (!std::isfinite(vloss)) throw NumericError("ppo: non-finite value loss");
        nn::adam_step(res.value, vg, opt);
      }
    }

    const PpoLossStats post = ppo_policy_loss(res.policy, batch, indices, lcfg, nullptr);
    if (!cfg.use_clip) beta = adapt_kl_beta(beta, post.mean_kl, cfg.kl_target);

    for (const auto& ep : envs.finished()) {
      window.push(ep.success);
      return_window.push_back(ep.episode_return);
      while (return_window.size() > static_cast<std::size_t>(cfg.advance_window))
        return_window.pop_front();
    }
    envs.clear_finished();

    TrainIterationRow row;
    row.iteration = iter;
    row.env_steps = res.env_steps;
    row.mean_return = std::nan("");
    if (!return_window.empty()) {
      double sum = 0.0;
      for (double r : return_window) sum += r;
      row.mean_return = sum / static_cast<double>(return_window.size());
    }
    row.success_rate = window.count() > 0 ? window.rate() : std::nan("");
    row.kl = post.mean_kl;
    row.beta = beta;
    row.phase = wait_phase_name(phase);
    res.rows.push_back(row);
    if (hooks.on_metrics) hooks.on_metrics(row);
    if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(res.policy, res.value, iter);
    res.iterations = iter;
    res.final_success_rate = window.count() > 0 ? window.rate() : 0.0;

    const bool last_phase = res.phase_index + 1 == cfg.schedule.size();
    if (!last_phase && should_advance(window, cfg.advance_threshold)) {
      // Fresh episodes under the new mask; in-flight ones mixed two regimes.
      ++res.phase_index;
      window.clear();
      return_window.clear();
      obs_rows = envs.reset_all();
      envs.clear_finished();
    } else if (last_phase && cfg.early_stop_success >= 0.0 && window.full() &&
               window.rate() >= cfg.early_stop_success) {
      res.early_stopped = true;
      break;
    }
  }
  return res;
}

}  // namespace mixline::rl
