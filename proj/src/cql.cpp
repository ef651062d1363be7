#include "mixline/cql.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "mixline/errors.hpp"
#include "mixline/gaussian.hpp"

namespace mixline::rl {

using nn::AdamConfig;
using nn::MlpCache;

namespace {

void shuffle_indices(std::vector<std::size_t>& idx, RngStream& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
}

// [states | actions] rows for the critic input.
Matrix concat_rows(const Matrix& s, const Matrix& a) {
  Matrix out(s.rows, s.cols + a.cols);
  for (int i = 0; i < s.rows; ++i) {
    double* r = out.row(i);
    std::copy(s.row(i), s.row(i) + s.cols, r);
    std::copy(a.row(i), a.row(i) + a.cols, r + s.cols);
  }
  return out;
}

std::vector<int> q_layer_sizes(int obs_dim, int action_dim, const std::vector<int>& hidden) {
  std::vector<int> sizes = {obs_dim + action_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return sizes;
}

}  // namespace

// ---------------------------------------------------------------------------
// State / config

double SacState::alpha_ent() const { return std::exp(log_alpha); }

SacState make_sac_state(int obs_dim, int action_dim, const std::vector<int>& hidden,
                        RngStream rng) {
  if (obs_dim < 1 || action_dim < 1) throw ConfigError("make_sac_state: dims must be positive");
  std::vector<int> pol = {obs_dim};
  pol.insert(pol.end(), hidden.begin(), hidden.end());
  pol.push_back(2 * action_dim);
  SacState s;
  s.policy = nn::mlp_init(pol, rng.split("policy"), 0.01);
  s.q1 = nn::mlp_init(q_layer_sizes(obs_dim, action_dim, hidden), rng.split("q1"));
  s.q2 = nn::mlp_init(q_layer_sizes(obs_dim, action_dim, hidden), rng.split("q2"));
  s.q1_target = s.q1;
  s.q2_target = s.q2;
  s.log_alpha = 0.0;
  s.target_entropy = -static_cast<double>(action_dim);
  return s;
}

std::string mu_mode_name(MuMode mode) {
  return mode == MuMode::kCurrentPolicy ? "current_policy" : "uniform_mix";
}

MuMode mu_mode_from_name(const std::string& name) {
  if (name == "current_policy") return MuMode::kCurrentPolicy;
  if (name == "uniform_mix") return MuMode::kUniformMix;
  throw ConfigError("unknown mu_mode: " + name);
}

void validate(const CqlConfig& cfg) {
  if (!(cfg.alpha_cql >= 0.0)) throw ConfigError("cql: alpha_cql must be >= 0");
  if (cfg.num_sampled_actions < 1) throw ConfigError("cql: num_sampled_actions must be >= 1");
  if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ConfigError("cql: gamma must be in [0, 1]");
  if (!(cfg.polyak_tau > 0.0 && cfg.polyak_tau <= 1.0))
    throw ConfigError("cql: polyak_tau must be in (0, 1]");
  if (!(cfg.lr_policy > 0.0) || !(cfg.lr_critic > 0.0))
    throw ConfigError("cql: learning rates must be positive");
  if (!(cfg.lr_alpha >= 0.0)) throw ConfigError("cql: lr_alpha must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("cql: batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// Minibatches

QBatch sample_qbatch(const data::OfflineDataset& ds, int batch_size, RngStream& rng) {
  const std::uint64_t n = ds.transition_count();
  if (n == 0) throw ConfigError("sample_qbatch: empty dataset");
  if (batch_size < 1) throw ConfigError("sample_qbatch: batch_size must be >= 1");
  const int od = ds.header().obs_dim;
  const int ad = ds.header().action_dim;
  QBatch b;
  b.states = Matrix(batch_size, od);
  b.actions = Matrix(batch_size, ad);
  b.next_states = Matrix(batch_size, od);
  b.rewards.resize(batch_size);
  b.done_flags.resize(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const auto tr = ds.transition(rng.uniform_index(n));
    std::copy(tr.obs.begin(), tr.obs.end(), b.states.row(i));
    std::copy(tr.action.begin(), tr.action.end(), b.actions.row(i));
    std::copy(tr.next_obs.begin(), tr.next_obs.end(), b.next_states.row(i));
    b.rewards[i] = tr.reward;
    b.done_flags[i] = tr.done ? 1 : 0;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Bellman targets

Vec bellman_target(const QBatch& batch, const SacState& sac, double gamma, RngStream& rng) {
  const int B = batch.size();
  const int od = sac.obs_dim();
  const int d = sac.action_dim();
  if (batch.states.cols != od || batch.actions.cols != d || batch.next_states.cols != od)
    throw ShapeError("bellman_target: batch dims do not match the nets");
  const double alpha = sac.alpha_ent();
  Vec y(B), eps(d), qin(od + d);
  for (int i = 0; i < B; ++i) {
    const std::span<const double> next(batch.next_states.row(i), static_cast<std::size_t>(od));
    const Vec out = nn::mlp_forward(sac.policy, next);
    const nn::GaussianHead head = nn::head_from_output(out);
    for (int j = 0; j < d; ++j) eps[j] = rng.normal();
    const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
    std::copy(next.begin(), next.end(), qin.begin());
    std::copy(samp.action.begin(), samp.action.end(), qin.begin() + od);
    const double q1 = nn::mlp_forward(sac.q1_target, qin)[0];
    const double q2 = nn::mlp_forward(sac.q2_target, qin)[0];
    const double backup = std::min(q1, q2) - alpha * samp.log_prob;
    y[i] = batch.rewards[i] + gamma * (batch.done_flags[i] ? 0.0 : 1.0) * backup;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Regularizer

MuSamples draw_mu_samples(const nn::MlpParams& policy, const Matrix& states,
                          const CqlConfig& cfg, RngStream& rng) {
  const int K = cfg.num_sampled_actions;
  if (K < 1) throw ConfigError("cql: num_sampled_actions must be >= 1");
  const int B = states.rows;
  const int d = policy.output_dim() / 2;
  if (states.cols != policy.input_dim()) throw ShapeError("draw_mu_samples: state dim mismatch");
  const int k_uniform = cfg.mu_mode == MuMode::kUniformMix ? K / 2 : 0;
  const int k_policy = K - k_uniform;
  const double log_uniform = -static_cast<double>(d) * std::log(2.0);

  MuSamples mu;
  mu.per_state = K;
  mu.actions = Matrix(B * K, d);
  mu.log_proposal.resize(static_cast<std::size_t>(B) * K);
  Vec eps(d);
  for (int i = 0; i < B; ++i) {
    int row = i * K;
    for (int k = 0; k < k_uniform; ++k, ++row) {
      double* a = mu.actions.row(row);
      for (int j = 0; j < d; ++j) a[j] = rng.uniform(-1.0, 1.0);
      mu.log_proposal[row] = log_uniform;
    }
    if (k_policy > 0) {
      const std::span<const double> s(states.row(i), static_cast<std::size_t>(states.cols));
      const nn::GaussianHead head = nn::head_from_output(nn::mlp_forward(policy, s));
      for (int k = 0; k < k_policy; ++k, ++row) {
        for (int j = 0; j < d; ++j) eps[j] = rng.normal();
        const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
        std::copy(samp.action.begin(), samp.action.end(), mu.actions.row(row));
        mu.log_proposal[row] = samp.log_prob;
      }
    }
  }
  return mu;
}

double weighted_logmeanexp(std::span<const double> q, std::span<const double> w) {
  if (q.size() != w.size() || q.empty()) throw ShapeError("weighted_logmeanexp: bad lengths");
  double mx = -std::numeric_limits<double>::infinity();
  double mw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < q.size(); ++k) {
    mx = std::max(mx, q[k] + w[k]);
    mw = std::max(mw, w[k]);
  }
  double sx = 0.0, sw = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    sx += std::exp(q[k] + w[k] - mx);
    sw += std::exp(w[k] - mw);
  }
  return (mx - mw) + std::log(sx / sw);
}

CqlRegStats cql_regularizer_at(const nn::MlpParams& q, const Matrix& states,
                               const Matrix& dataset_actions, const MuSamples& mu,
                               double alpha_cql, nn::MlpGrads* grads, Vec* dataset_q_out) {
  const int B = states.rows;
  const int d = dataset_actions.cols;
  const int K = mu.per_state;
  if (!(alpha_cql >= 0.0)) throw ConfigError("cql: alpha_cql must be >= 0");
  if (dataset_actions.rows != B || mu.actions.rows != B * K || mu.actions.cols != d)
    throw ShapeError("cql_regularizer: sample/batch shapes disagree");
  if (q.input_dim() != states.cols + d) throw ShapeError("cql_regularizer: critic input mismatch");

  CqlRegStats stats;
  const Matrix data_in = concat_rows(states, dataset_actions);
  MlpCache data_cache;
  const Matrix q_data = nn::mlp_forward_batch(q, data_in, &data_cache);
  double data_sum = 0.0;
  for (int i = 0; i < B; ++i) data_sum += q_data.at(i, 0);
  stats.mean_dataset_q = data_sum / B;
  if (dataset_q_out) {
    dataset_q_out->resize(B);
    for (int i = 0; i < B; ++i) (*dataset_q_out)[i] = q_data.at(i, 0);
  }
  if (alpha_cql == 0.0) return stats;

  // Gaps against the dataset action keep an action-blind critic at exactly 0.
  Matrix samp_in(B * K, states.cols + d);
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < K; ++k) {
      double* r = samp_in.row(i * K + k);
      std::copy(states.row(i), states.row(i) + states.cols, r);
      const double* a = mu.actions.row(i * K + k);
      std::copy(a, a + d, r + states.cols);
    }
  MlpCache samp_cache;
  const Matrix q_samp = nn::mlp_forward_batch(q, samp_in, &samp_cache);

  Vec delta(K), w(K);
  Matrix up_samp(B * K, 1);
  double gap_sum = 0.0;
  for (int i = 0; i < B; ++i) {
    for (int k = 0; k < K; ++k) {
      delta[k] = q_samp.at(i * K + k, 0) - q_data.at(i, 0);
      w[k] = -mu.log_proposal[static_cast<std::size_t>(i) * K + k];
    }
    gap_sum += weighted_logmeanexp(delta, w);
    if (grads) {
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) m = std::max(m, delta[k] + w[k]);
      double s = 0.0;
      for (int k = 0; k < K; ++k) s += std::exp(delta[k] + w[k] - m);
      for (int k = 0; k < K; ++k)
        up_samp.at(i * K + k, 0) = alpha_cql / B * (std::exp(delta[k] + w[k] - m) / s);
    }
  }
  stats.mean_gap = gap_sum / B;
  stats.value = alpha_cql * stats.mean_gap;
  if (grads) {
    nn::mlp_backward_batch(q, samp_cache, up_samp, *grads);
    Matrix up_data(B, 1);
    for (int i = 0; i < B; ++i) up_data.at(i, 0) = -alpha_cql / B;
    nn::mlp_backward_batch(q, data_cache, up_data, *grads);
  }
  return stats;
}

CqlRegStats cql_regularizer(const nn::MlpParams& q, const QBatch& batch,
                            const nn::MlpParams& policy, const CqlConfig& cfg, RngStream& rng,
                            nn::MlpGrads* grads) {
  const MuSamples mu = draw_mu_samples(policy, batch.states, cfg, rng);
  return cql_regularizer_at(q, batch.states, batch.actions, mu, cfg.alpha_cql, grads);
}

// ---------------------------------------------------------------------------
// Loss pieces

double q_regression_loss(const nn::MlpParams& q, const Matrix& states, const Matrix& actions,
                         const Vec& targets, nn::MlpGrads* grads) {
  const int B = states.rows;
  if (actions.rows != B || static_cast<int>(targets.size()) != B)
    throw ShapeError("q_regression_loss: batch lengths disagree");
  const Matrix in = concat_rows(states, actions);
  MlpCache cache;
  const Matrix pred = nn::mlp_forward_batch(q, in, &cache);
  double loss = 0.0;
  Matrix up(B, 1);
  for (int i = 0; i < B; ++i) {
    const double diff = pred.at(i, 0) - targets[i];
    loss += 0.5 * diff * diff;
    up.at(i, 0) = diff / B;
  }
  loss /= B;
  if (grads) nn::mlp_backward_batch(q, cache, up, *grads);
  return loss;
}

double sac_policy_loss(const nn::MlpParams& policy, const nn::MlpParams& q1,
                       const nn::MlpParams& q2, const Matrix& states, const Matrix& noise,
                       double alpha_ent, nn::MlpGrads* grads, double* mean_log_pi_out) {
  const int B = states.rows;
  const int d = policy.output_dim() / 2;
  if (noise.rows != B || noise.cols != d) throw ShapeError("sac_policy_loss: noise shape");
  if (states.cols != policy.input_dim()) throw ShapeError("sac_policy_loss: state dim");

  MlpCache pol_cache;
  const Matrix raw = nn::mlp_forward_batch(policy, states, &pol_cache);

  // Reparameterized samples, mirroring gaussian_sample's conventions.
  Matrix z(B, d), t(B, d), act(B, d), sig_eps(B, d);
  std::vector<std::uint8_t> l_clamped(static_cast<std::size_t>(B) * d);
  std::vector<std::uint8_t> a_clamped(static_cast<std::size_t>(B) * d);
  Vec log_pi(B);
  for (int i = 0; i < B; ++i) {
    const std::span<const double> row(raw.row(i), static_cast<std::size_t>(2 * d));
    const nn::GaussianHead head = nn::head_from_output(row);
    for (int j = 0; j < d; ++j) {
      const double se = std::exp(head.log_std[j]) * noise.at(i, j);
      sig_eps.at(i, j) = se;
      z.at(i, j) = head.mean[j] + se;
      const double tj = std::tanh(z.at(i, j));
      t.at(i, j) = tj;
      act.at(i, j) = std::clamp(tj, -1.0 + 1e-12, 1.0 - 1e-12);
      a_clamped[static_cast<std::size_t>(i) * d + j] = (tj != act.at(i, j)) ? 1 : 0;
      l_clamped[static_cast<std::size_t>(i) * d + j] =
          (raw.at(i, d + j) < nn::kLogStdMin || raw.at(i, d + j) > nn::kLogStdMax) ? 1 : 0;
    }
    log_pi[i] =
        nn::gaussian_log_prob_z(head, std::span<const double>(z.row(i), static_cast<std::size_t>(d)));
  }

  const Matrix qin = concat_rows(states, act);
  MlpCache c1, c2;
  const Matrix q1v = nn::mlp_forward_batch(q1, qin, &c1);
  const Matrix q2v = nn::mlp_forward_batch(q2, qin, &c2);

  double loss = 0.0, lp_sum = 0.0;
  Matrix up1(B, 1), up2(B, 1);
  for (int i = 0; i < B; ++i) {
    const double mn = std::min(q1v.at(i, 0), q2v.at(i, 0));
    loss += alpha_ent * log_pi[i] - mn;
    lp_sum += log_pi[i];
    const bool pick1 = q1v.at(i, 0) <= q2v.at(i, 0);
    up1.at(i, 0) = pick1 ? -1.0 / B : 0.0;
    up2.at(i, 0) = pick1 ? 0.0 : -1.0 / B;
  }
  loss /= B;
  if (mean_log_pi_out) *mean_log_pi_out = lp_sum / B;
  if (!grads) return loss;

  // Critics stay fixed: only their input gradients flow back to the policy.
  nn::MlpGrads scratch1, scratch2;
  scratch1.init_like(q1);
  scratch2.init_like(q2);
  const Matrix din1 = nn::mlp_backward_batch(q1, c1, up1, scratch1);
  const Matrix din2 = nn::mlp_backward_batch(q2, c2, up2, scratch2);

  const int od = states.cols;
  Matrix up_pol(B, 2 * d);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < d; ++j) {
      const std::size_t flat = static_cast<std::size_t>(i) * d + j;
      const double tj = t.at(i, j);
      const double one_m_t2 = 1.0 - tj * tj;
      const double g_a = din1.at(i, od + j) + din2.at(i, od + j);
      // d loss / dz: the Q path through tanh plus the squash-correction term
      // of log pi; the Gaussian density term is constant under reparam.
      double g_z = (a_clamped[flat] ? 0.0 : g_a * one_m_t2);
      g_z += (alpha_ent / B) * (2.0 * tj * one_m_t2 / (one_m_t2 + nn::kTanhEps));
      up_pol.at(i, j) = g_z;
      const double g_l = g_z * sig_eps.at(i, j) + (alpha_ent / B) * (-1.0);
      up_pol.at(i, d + j) = l_clamped[flat] ? 0.0 : g_l;
    }
  nn::mlp_backward_batch(policy, pol_cache, up_pol, *grads);
  return loss;
}

void polyak_update(nn::MlpParams& target, const nn::MlpParams& live, double tau) {
  if (target.layer_sizes != live.layer_sizes) throw ShapeError("polyak_update: shape mismatch");
  for (int l = 0; l < target.num_layers(); ++l) {
    for (std::size_t k = 0; k < target.weights[l].a.size(); ++k)
      target.weights[l].a[k] = (1.0 - tau) * target.weights[l].a[k] + tau * live.weights[l].a[k];
    for (std::size_t k = 0; k < target.biases[l].size(); ++k)
      target.biases[l][k] = (1.0 - tau) * target.biases[l][k] + tau * live.biases[l][k];
  }
}

// ---------------------------------------------------------------------------
// One CQL-SAC update

SacUpdateStats cql_sac_update(SacState& sac, const QBatch& batch, const CqlConfig& cfg,
                              RngStream& rng) {
  validate(cfg);
  const int B = batch.size();
  const int d = sac.action_dim();
  if (B == 0) throw ShapeError("cql_sac_update: empty batch");
  if (static_cast<int>(batch.rewards.size()) != B ||
      static_cast<int>(batch.done_flags.size()) != B)
    throw ShapeError("cql_sac_update: batch lengths disagree");

  SacUpdateStats st;
  const Vec y = bellman_target(batch, sac, cfg.gamma, rng);
  const MuSamples mu = draw_mu_samples(sac.policy, batch.states, cfg, rng);

  const AdamConfig copt{.lr = cfg.lr_critic};
  Vec dq1, dq2;
  nn::MlpGrads g;
  g.init_like(sac.q1);
  {
    const CqlRegStats r = cql_regularizer_at(sac.q1, batch.states, batch.actions, mu,
                                             cfg.alpha_cql, &g, &dq1);
    const double l = q_regression_loss(sac.q1, batch.states, batch.actions, y, &g);
    if (!std::isfinite(l + r.value)) throw NumericError("cql: non-finite critic loss");
    nn::adam_step(sac.q1, g, copt);
    st.bellman_loss += l;
    st.cql_reg += r.value;
  }
  g.init_like(sac.q2);
  {
    const CqlRegStats r = cql_regularizer_at(sac.q2, batch.states, batch.actions, mu,
                                             cfg.alpha_cql, &g, &dq2);
    const double l = q_regression_loss(sac.q2, batch.states, batch.actions, y, &g);
    if (!std::isfinite(l + r.value)) throw NumericError("cql: non-finite critic loss");
    nn::adam_step(sac.q2, g, copt);
    st.bellman_loss += l;
    st.cql_reg += r.value;
  }
  st.bellman_loss *= 0.5;
  st.cql_reg *= 0.5;
  double mn_sum = 0.0;
  for (int i = 0; i < B; ++i) mn_sum += std::min(dq1[i], dq2[i]);
  st.mean_dataset_q = mn_sum / B;

  Matrix noise(B, d);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < d; ++j) noise.at(i, j) = rng.normal();
  nn::MlpGrads pg;
  pg.init_like(sac.policy);
  st.policy_loss = sac_policy_loss(sac.policy, sac.q1, sac.q2, batch.states, noise,
                                   sac.alpha_ent(), &pg, &st.mean_log_pi);
  if (!std::isfinite(st.policy_loss)) throw NumericError("cql: non-finite policy loss");
  nn::adam_step(sac.policy, pg, AdamConfig{.lr = cfg.lr_policy});

  // Temperature: gradient step on -log_alpha * (mean log pi + target entropy).
  sac.log_alpha += cfg.lr_alpha * (st.mean_log_pi + sac.target_entropy);
  st.alpha_ent = sac.alpha_ent();

  polyak_update(sac.q1_target, sac.q1, cfg.polyak_tau);
  polyak_update(sac.q2_target, sac.q2, cfg.polyak_tau);
  return st;
}

// ---------------------------------------------------------------------------
// Offline training

Vec dataset_mc_returns(const data::OfflineDataset& ds, double gamma) {
  Vec out;
  out.reserve(ds.transition_count());
  Vec g;
  for (const auto& t : ds.trajectories()) {
    const int T = t.length();
    g.resize(T);
    double G = 0.0;
    for (int i = T - 1; i >= 0; --i) {
      G = t.rewards[i] + gamma * G;
      g[i] = G;
    }
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

double dataset_mean_q(const SacState& sac, const data::OfflineDataset& ds) {
  const std::uint64_t n = ds.transition_count();
  if (n == 0) throw ConfigError("dataset_mean_q: empty dataset");
  const int od = ds.header().obs_dim;
  const int ad = ds.header().action_dim;
  if (od != sac.obs_dim() || ad != sac.action_dim())
    throw ConfigError("dataset_mean_q: dataset dims do not match the nets");
  const std::uint64_t chunk = 8192;
  double sum = 0.0;
  for (std::uint64_t start = 0; start < n; start += chunk) {
    const int m = static_cast<int>(std::min(chunk, n - start));
    Matrix in(m, od + ad);
    for (int i = 0; i < m; ++i) {
      const auto tr = ds.transition(start + i);
      double* r = in.row(i);
      std::copy(tr.obs.begin(), tr.obs.end(), r);
      std::copy(tr.action.begin(), tr.action.end(), r + od);
    }
    const Matrix q1 = nn::mlp_forward_batch(sac.q1, in);
    const Matrix q2 = nn::mlp_forward_batch(sac.q2, in);
    for (int i = 0; i < m; ++i) sum += std::min(q1.at(i, 0), q2.at(i, 0));
  }
  return sum / static_cast<double>(n);
}

OfflineTrainResult train_offline(const data::OfflineDataset& ds, const OfflineTrainConfig& cfg,
                                 std::uint64_t seed, env::RlEnv* eval_env,
                                 const OfflineHooks& hooks) {
  validate(cfg.cql);
  if (cfg.eval_every < 1) throw ConfigError("train_offline: eval_every must be >= 1");
  if (cfg.eval_episodes < 0 || cfg.conserve_probe < 1)
    throw ConfigError("train_offline: bad eval settings");
  const std::uint64_t n = ds.transition_count();
  if (n == 0) throw ConfigError("train_offline: empty dataset");
  const int od = ds.header().obs_dim;
  const int ad = ds.header().action_dim;
  if (eval_env && (eval_env->obs_dim() != od || eval_env->action_dim() != ad))
    throw ConfigError("train_offline: dataset layout does not match the eval env");

  RngStream master(seed);
  OfflineTrainResult res;
  res.sac = make_sac_state(od, ad, cfg.hidden, master.split("init"));
  RngStream sample_rng = master.split("batches");
  RngStream update_rng = master.split("updates");
  RngStream eval_rng = master.split("eval");
  RngStream probe_rng = master.split("probe");

  const Vec mc = dataset_mc_returns(ds, cfg.cql.gamma);

  // Fixed conservatism probe: min-critic Q and MC return over the same rows.
  std::vector<std::uint64_t> probe;
  if (n <= static_cast<std::uint64_t>(cfg.conserve_probe)) {
    probe.resize(n);
    std::iota(probe.begin(), probe.end(), 0);
  } else {
    probe.resize(cfg.conserve_probe);
    for (auto& p : probe) p = probe_rng.uniform_index(n);
  }
  Matrix probe_in(static_cast<int>(probe.size()), od + ad);
  double probe_mc = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const auto tr = ds.transition(probe[i]);
    double* r = probe_in.row(static_cast<int>(i));
    std::copy(tr.obs.begin(), tr.obs.end(), r);
    std::copy(tr.action.begin(), tr.action.end(), r + od);
    probe_mc += mc[probe[i]];
  }
  probe_mc /= static_cast<double>(probe.size());

  double acc_bell = 0.0, acc_reg = 0.0, acc_pol = 0.0;
  std::uint64_t acc_n = 0, eval_counter = 0;
  double last_alpha = res.sac.alpha_ent();

  for (std::uint64_t step = 1; step <= cfg.grad_steps; ++step) {
    const QBatch batch = sample_qbatch(ds, cfg.cql.batch_size, sample_rng);
    const SacUpdateStats st = cql_sac_update(res.sac, batch, cfg.cql, update_rng);
    acc_bell += st.bellman_loss;
    acc_reg += st.cql_reg;
    acc_pol += st.policy_loss;
    ++acc_n;
    last_alpha = st.alpha_ent;

    if (step % cfg.eval_every == 0 || step == cfg.grad_steps) {
      OfflineRow row;
      row.grad_step = step;
      row.bellman_loss = acc_bell / static_cast<double>(acc_n);
      row.cql_reg = acc_reg / static_cast<double>(acc_n);
      row.policy_loss = acc_pol / static_cast<double>(acc_n);
      row.alpha_ent = last_alpha;
      acc_bell = acc_reg = acc_pol = 0.0;
      acc_n = 0;

      const Matrix q1 = nn::mlp_forward_batch(res.sac.q1, probe_in);
      const Matrix q2 = nn::mlp_forward_batch(res.sac.q2, probe_in);
      double mn = 0.0;
      for (int i = 0; i < probe_in.rows; ++i) mn += std::min(q1.at(i, 0), q2.at(i, 0));
      row.mean_dataset_q = mn / probe_in.rows;
      row.mean_mc_return = probe_mc;

      row.mean_return = std::nan("");
      row.success_rate = std::nan("");
      if (eval_env && cfg.eval_episodes > 0) {
        double ret = 0.0;
        int succ = 0;
        for (int ep = 0; ep < cfg.eval_episodes; ++ep) {
          eval_env->seed(eval_rng.split("episode", eval_counter++).state());
          Vec obs = eval_env->reset();
          bool ep_succ = false;
          double ep_ret = 0.0;
          for (int t = 0; t < 100000; ++t) {
            const env::StepOut out = eval_env->step(policy_action(res.sac.policy, obs, nullptr));
            ep_ret += out.reward;
            ep_succ = ep_succ || out.success;
            obs = out.obs;
            if (out.done) break;
          }
          ret += ep_ret;
          succ += ep_succ ? 1 : 0;
        }
        row.mean_return = ret / cfg.eval_episodes;
        row.success_rate = static_cast<double>(succ) / cfg.eval_episodes;
      }
      res.rows.push_back(row);
      if (hooks.on_metrics) hooks.on_metrics(row);
    }
  }
  res.grad_steps = cfg.grad_steps;
  res.final_mean_dataset_q = dataset_mean_q(res.sac, ds);
  double mc_sum = 0.0;
  for (double v : mc) mc_sum += v;
  res.final_mean_mc_return = mc_sum / static_cast<double>(mc.size());
  return res;
}

// ---------------------------------------------------------------------------
// On-policy coupling

Vec q_advantages(const nn::MlpParams& q, const RolloutBatch& batch,
                 const nn::MlpParams& policy, int num_samples, RngStream& rng) {
  if (num_samples < 1) throw ConfigError("q_advantages: need at least one sample");
  const int B = batch.size();
  const int d = batch.action_dim();
  const int od = batch.obs.cols;
  if (q.input_dim() != od + d) throw ShapeError("q_advantages: critic input mismatch");

  const Matrix data_in = concat_rows(batch.obs, batch.actions);
  const Matrix q_data = nn::mlp_forward_batch(q, data_in);

  const Matrix raw = nn::mlp_forward_batch(policy, batch.obs);
  Matrix samp_in(B * num_samples, od + d);
  Vec eps(d);
  for (int i = 0; i < B; ++i) {
    const nn::GaussianHead head = nn::head_from_output(
        std::span<const double>(raw.row(i), static_cast<std::size_t>(2 * d)));
    for (int k = 0; k < num_samples; ++k) {
      for (int j = 0; j < d; ++j) eps[j] = rng.normal();
      const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
      double* r = samp_in.row(i * num_samples + k);
      std::copy(batch.obs.row(i), batch.obs.row(i) + od, r);
      std::copy(samp.action.begin(), samp.action.end(), r + od);
    }
  }
  const Matrix q_samp = nn::mlp_forward_batch(q, samp_in);
  Vec adv(B);
  for (int i = 0; i < B; ++i) {
    double s = 0.0;
    for (int k = 0; k < num_samples; ++k) s += q_samp.at(i * num_samples + k, 0);
    adv[i] = q_data.at(i, 0) - s / num_samples;
  }
  return adv;
}

double cql_ppo_critic_loss(const nn::MlpParams& q, const RolloutBatch& batch,
                           std::span<const std::size_t> idx, const nn::MlpParams& policy,
                           const CqlConfig& cfg, RngStream& rng, nn::MlpGrads* grads) {
  const int m = static_cast<int>(idx.size());
  if (m == 0) throw ShapeError("cql_ppo_critic_loss: empty index set");
  const int d = batch.action_dim();
  const int od = batch.obs.cols;
  Matrix gs(m, od), ga(m, d);
  Vec gy(m);
  for (int i = 0; i < m; ++i) {
    const std::size_t r = idx[i];
    std::copy(batch.obs.row(static_cast<int>(r)), batch.obs.row(static_cast<int>(r)) + od,
              gs.row(i));
    std::copy(batch.actions.row(static_cast<int>(r)),
              batch.actions.row(static_cast<int>(r)) + d, ga.row(i));
    gy[i] = batch.returns[r];
  }
  const double loss = q_regression_loss(q, gs, ga, gy, grads);
  // The rollout actions are the dataset term; proposals always come from the
  // current policy here.
  CqlConfig mode = cfg;
  mode.mu_mode = MuMode::kCurrentPolicy;
  const MuSamples mu = draw_mu_samples(policy, gs, mode, rng);
  const CqlRegStats reg = cql_regularizer_at(q, gs, ga, mu, cfg.alpha_cql, grads);
  return loss + reg.value;
}

CqlPpoStats cql_ppo_update(const RolloutBatch& batch, nn::MlpParams& q, nn::MlpParams& policy,
                           const PpoConfig& ppo_cfg, const CqlConfig& cql_cfg,
                           std::uint64_t seed) {
  validate(cql_cfg);
  const int B = batch.size();
  if (B == 0) throw ShapeError("cql_ppo_update: empty batch");
  const int d = batch.action_dim();

  RngStream master(seed);
  RngStream mu_rng = master.split("critic_mu");
  RngStream cshuffle = master.split("critic_shuffle");
  RngStream adv_rng = master.split("advantages");
  RngStream pshuffle = master.split("policy_shuffle");

  std::vector<std::size_t> idx(B);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::size_t> all(idx);

  nn::MlpGrads qg;
  qg.init_like(q);
  const AdamConfig copt{.lr = cql_cfg.lr_critic};
  for (int epoch = 0; epoch < ppo_cfg.epochs; ++epoch) {
    shuffle_indices(idx, cshuffle);
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(ppo_cfg.minibatch)) {
      const std::size_t len =
          std::min(static_cast<std::size_t>(ppo_cfg.minibatch), idx.size() - start);
      qg.zero();
      const double l = cql_ppo_critic_loss(
          q, batch, std::span<const std::size_t>(idx.data() + start, len), policy, cql_cfg,
          mu_rng, &qg);
      if (!std::isfinite(l)) throw NumericError("cql+ppo: non-finite critic loss");
      nn::adam_step(q, qg, copt);
    }
  }

  CqlPpoStats out;
  {
    RngStream stat_rng = master.split("critic_stats");
    out.critic_loss = cql_ppo_critic_loss(q, batch, all, policy, cql_cfg, stat_rng, nullptr);
    RngStream reg_rng = master.split("reg_stats");
    CqlConfig mode = cql_cfg;
    mode.mu_mode = MuMode::kCurrentPolicy;
    const MuSamples mu = draw_mu_samples(policy, batch.obs, mode, reg_rng);
    out.cql_reg =
        cql_regularizer_at(q, batch.obs, batch.actions, mu, cql_cfg.alpha_cql, nullptr).value;
  }

  RolloutBatch shaped = batch;
  shaped.advantages = q_advantages(q, batch, policy, cql_cfg.num_sampled_actions, adv_rng);
  if (ppo_cfg.normalize_advantages) normalize_advantages(shaped.advantages);

  PpoLossConfig lcfg;
  lcfg.use_clip = ppo_cfg.use_clip;
  lcfg.clip_eps = ppo_cfg.clip_eps;
  lcfg.kl_beta = ppo_cfg.beta0;
  lcfg.entropy_coef = ppo_cfg.entropy_coef;
  lcfg.free = free_dims(batch.phase, d);

  nn::MlpGrads pg;
  pg.init_like(policy);
  const AdamConfig popt{.lr = ppo_cfg.lr};
  for (int epoch = 0; epoch < ppo_cfg.epochs; ++epoch) {
    shuffle_indices(idx, pshuffle);
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(ppo_cfg.minibatch)) {
      const std::size_t len =
          std::min(static_cast<std::size_t>(ppo_cfg.minibatch), idx.size() - start);
      pg.zero();
      const PpoLossStats st = ppo_policy_loss(
          policy, shaped, std::span<const std::size_t>(idx.data() + start, len), lcfg, &pg);
      if (!std::isfinite(st.loss)) throw NumericError("cql+ppo: non-finite policy loss");
      mask_log_std_rows(pg, d);
      nn::adam_step(policy, pg, popt);
    }
  }
  out.policy = ppo_policy_loss(policy, shaped, all, lcfg, nullptr);
  return out;
}

CqlPpoTrainResult train_stage_cqlppo(env::VecEnv& envs, const PpoConfig& ppo_cfg,
                                     const CqlConfig& cql_cfg, std::uint64_t seed,
                                     const TrainHooks& hooks) {
  validate(cql_cfg);
  if (ppo_cfg.schedule.empty()) throw ConfigError("cql+ppo training: empty phase schedule");
  for (const WaitPhase p : ppo_cfg.schedule)
    if (p != WaitPhase::kBoth) throw ConfigError("cql+ppo training: wait phases unsupported");
  if (envs.size() != ppo_cfg.num_envs) throw ConfigError("cql+ppo training: env count mismatch");
  const int od = envs.obs_dim();
  const int d = envs.action_dim();
  const std::uint64_t steps_per_iter =
      static_cast<std::uint64_t>(ppo_cfg.num_envs) * static_cast<std::uint64_t>(ppo_cfg.horizon);

  RngStream master(seed);
  CqlPpoTrainResult res;
  res.policy = make_policy_net(od, d, ppo_cfg.hidden, master.split("policy_init"),
                               ppo_cfg.init_log_std, ppo_cfg.final_scale);
  res.value = make_value_net(od, ppo_cfg.hidden, master.split("value_init"));
  res.q = nn::mlp_init(q_layer_sizes(od, d, ppo_cfg.hidden), master.split("q_init"));
  RngStream noise = master.split("noise");
  RngStream shuffle = master.split("shuffle");

  nn::MlpGrads vg;
  vg.init_like(res.value);
  const AdamConfig vopt{.lr = ppo_cfg.lr};

  std::vector<Vec> obs_rows = envs.reset_all();
  envs.clear_finished();

  double beta = ppo_cfg.beta0;
  SuccessWindow window(ppo_cfg.advance_window);
  std::deque<double> return_window;
  std::vector<std::size_t> idx;

  const int iterations =
      static_cast<int>((ppo_cfg.total_env_steps + steps_per_iter - 1) / steps_per_iter);
  for (int iter = 1; iter <= iterations; ++iter) {
    RolloutBatch batch = collect_rollout(envs, res.policy, res.value, ppo_cfg.horizon,
                                         WaitPhase::kBoth, noise, obs_rows);
    res.env_steps += steps_per_iter;
    finish_rollout(batch, res.value, obs_rows, ppo_cfg.gamma, ppo_cfg.lambda);

    PpoConfig iter_cfg = ppo_cfg;
    iter_cfg.beta0 = beta;
    const CqlPpoStats st =
        cql_ppo_update(batch, res.q, res.policy, iter_cfg, cql_cfg,
                       master.split("update", static_cast<std::uint64_t>(iter)).state());

    idx.resize(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int epoch = 0; epoch < ppo_cfg.epochs; ++epoch) {
      shuffle_indices(idx, shuffle);
      for (std::size_t start = 0; start < idx.size();
           start += static_cast<std::size_t>(ppo_cfg.minibatch)) {
        const std::size_t len =
            std::min(static_cast<std::size_t>(ppo_cfg.minibatch), idx.size() - start);
        vg.zero();
        const double vl = value_loss(res.value, batch,
                                     std::span<const std::size_t>(idx.data() + start, len), &vg);
        if (!std::isfinite(vl)) throw NumericError("cql+ppo: non-finite value loss");
        nn::adam_step(res.value, vg, vopt);
      }
    }

    if (!ppo_cfg.use_clip) beta = adapt_kl_beta(beta, st.policy.mean_kl, ppo_cfg.kl_target);

    for (const auto& ep : envs.finished()) {
      window.push(ep.success);
      return_window.push_back(ep.episode_return);
      while (return_window.size() > static_cast<std::size_t>(ppo_cfg.advance_window))
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
    row.kl = st.policy.mean_kl;
    row.beta = beta;
    row.phase = wait_phase_name(WaitPhase::kBoth);
    res.rows.push_back(row);
    if (hooks.on_metrics) hooks.on_metrics(row);
    if (ppo_cfg.checkpoint_every > 0 && iter % ppo_cfg.checkpoint_every == 0 &&
        hooks.on_checkpoint)
      hooks.on_checkpoint(res.policy, res.value, iter);
    res.iterations = iter;

    if (ppo_cfg.early_stop_success >= 0.0 && window.full() &&
        window.rate() >= ppo_cfg.early_stop_success)
      break;
  }
  return res;
}

}  // namespace mixline::rl
