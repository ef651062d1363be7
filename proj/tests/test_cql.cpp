#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixline/cql.hpp"
#include "mixline/env_bench.hpp"
#include "mixline/errors.hpp"

using namespace mixline;
using namespace mixline::rl;

namespace {

double max_param_diff(const nn::MlpParams& a, const nn::MlpParams& b) {
  double m = 0.0;
  for (int l = 0; l < a.num_layers(); ++l) {
    for (std::size_t k = 0; k < a.weights[l].a.size(); ++k)
      m = std::max(m, std::abs(a.weights[l].a[k] - b.weights[l].a[k]));
    for (std::size_t k = 0; k < a.biases[l].size(); ++k)
      m = std::max(m, std::abs(a.biases[l][k] - b.biases[l][k]));
  }
  return m;
}

bool grads_equal(const nn::MlpGrads& a, const nn::MlpGrads& b) {
  for (std::size_t l = 0; l < a.dw.size(); ++l) {
    if (a.dw[l].a != b.dw[l].a) return false;
    if (a.db[l] != b.db[l]) return false;
  }
  return true;
}

Matrix random_matrix(int rows, int cols, RngStream& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m.at(i, j) = scale * rng.normal();
  return m;
}

// Random-action pendulum episodes packed as an offline dataset.
data::OfflineDataset pendulum_dataset(int episodes, std::uint64_t seed) {
  env::PendulumEnv env(0);
  RngStream rng(seed);
  std::vector<data::Trajectory> trajs;
  const int T = env::PendulumEnv::kEpisodeLength;
  for (int ep = 0; ep < episodes; ++ep) {
    const std::uint64_t s = rng.split("episode", ep).state();
    env.seed(s);
    Vec obs = env.reset();
    data::Trajectory t;
    t.obs = Matrix(T, 3);
    t.actions = Matrix(T, 1);
    t.rewards.resize(T);
    t.next_obs = Matrix(T, 3);
    t.dones.assign(T, 0);
    t.stage_ids.assign(T, 1);
    t.seed = s;
    for (int k = 0; k < T; ++k) {
      std::copy(obs.begin(), obs.end(), t.obs.row(k));
      const double a = rng.uniform(-1.0, 1.0);
      t.actions.at(k, 0) = a;
      const env::StepOut out = env.step(Vec{a});
      t.rewards[k] = out.reward;
      std::copy(out.obs.begin(), out.obs.end(), t.next_obs.row(k));
      t.dones[k] = out.done ? 1 : 0;
      t.episode_return += out.reward;
      t.success = t.success || out.success;
      obs = out.obs;
    }
    trajs.push_back(std::move(t));
  }
  return data::OfflineDataset(data::make_bench_header("pendulum_swingup", 3, 1, "test"),
                              std::move(trajs));
}

QBatch random_qbatch(int b, int od, int ad, std::uint64_t seed) {
  RngStream rng(seed);
  QBatch batch;
  batch.states = random_matrix(b, od, rng);
  batch.actions = random_matrix(b, ad, rng, 0.5);
  batch.next_states = random_matrix(b, od, rng);
  batch.rewards.resize(b);
  batch.done_flags.assign(b, 0);
  for (int i = 0; i < b; ++i) batch.rewards[i] = rng.normal();
  return batch;
}

// Pendulum rollout collected by a freshly initialized policy/value pair.
struct PendulumRollout {
  nn::MlpParams policy, value;
  RolloutBatch batch;
};

PendulumRollout pendulum_rollout(int n_envs, int horizon, std::uint64_t seed) {
  std::vector<std::unique_ptr<env::RlEnv>> list;
  for (int i = 0; i < n_envs; ++i) list.push_back(std::make_unique<env::PendulumEnv>(0));
  env::VecEnv envs(std::move(list), seed);
  RngStream master(seed);
  PendulumRollout r;
  r.policy = make_policy_net(3, 1, {8}, master.split("p"));
  r.value = make_value_net(3, {8}, master.split("v"));
  RngStream noise = master.split("noise");
  std::vector<Vec> obs_rows = envs.reset_all();
  envs.clear_finished();
  r.batch = collect_rollout(envs, r.policy, r.value, horizon, WaitPhase::kBoth, noise, obs_rows);
  finish_rollout(r.batch, r.value, obs_rows, 0.99, 0.95);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("config validation rejects out-of-range fields") {
  CqlConfig ok;
  CHECK_NOTHROW(validate(ok));
  auto bad = [](auto mut) {
    CqlConfig c;
    mut(c);
    CHECK_THROWS_AS(validate(c), ConfigError);
  };
  bad([](CqlConfig& c) { c.alpha_cql = -1.0; });
  bad([](CqlConfig& c) { c.num_sampled_actions = 0; });
  bad([](CqlConfig& c) { c.gamma = 1.5; });
  bad([](CqlConfig& c) { c.gamma = -0.1; });
  bad([](CqlConfig& c) { c.polyak_tau = 0.0; });
  bad([](CqlConfig& c) { c.polyak_tau = 1.5; });
  bad([](CqlConfig& c) { c.lr_policy = 0.0; });
  bad([](CqlConfig& c) { c.lr_critic = -1e-4; });
  bad([](CqlConfig& c) { c.lr_alpha = -1e-4; });
  bad([](CqlConfig& c) { c.batch_size = 0; });
  CqlConfig edge;
  edge.polyak_tau = 1.0;
  edge.gamma = 1.0;
  edge.lr_alpha = 0.0;  // frozen temperature is allowed
  CHECK_NOTHROW(validate(edge));

  CHECK(mu_mode_from_name("uniform_mix") == MuMode::kUniformMix);
  CHECK(mu_mode_from_name("current_policy") == MuMode::kCurrentPolicy);
  CHECK(mu_mode_name(MuMode::kUniformMix) == "uniform_mix");
  CHECK_THROWS_AS(mu_mode_from_name("softmax"), ConfigError);
}

TEST_CASE("fresh sac state starts with targets equal to the live critics") {
  const SacState sac = make_sac_state(3, 2, {8}, RngStream(3));
  CHECK(sac.obs_dim() == 3);
  CHECK(sac.action_dim() == 2);
  CHECK(sac.policy.output_dim() == 4);
  CHECK(sac.q1.input_dim() == 5);
  CHECK(max_param_diff(sac.q1, sac.q1_target) == 0.0);
  CHECK(max_param_diff(sac.q2, sac.q2_target) == 0.0);
  CHECK(sac.alpha_ent() == 1.0);
  CHECK(sac.target_entropy == -2.0);
  CHECK(max_param_diff(sac.q1, sac.q2) > 0.0);  // independently initialized
}

// ---------------------------------------------------------------------------

TEST_CASE("bellman targets match a transition-by-transition oracle") {
  const SacState sac = make_sac_state(3, 2, {8}, RngStream(11));
  QBatch batch = random_qbatch(5, 3, 2, 21);
  batch.done_flags[2] = 1;

  RngStream rng(77), oracle_rng(77);
  const Vec y = bellman_target(batch, sac, 0.97, rng);

  const double alpha = sac.alpha_ent();
  Vec eps(2), qin(5);
  for (int i = 0; i < 5; ++i) {
    const std::span<const double> next(batch.next_states.row(i), 3);
    const nn::GaussianHead head = nn::head_from_output(nn::mlp_forward(sac.policy, next));
    for (int j = 0; j < 2; ++j) eps[j] = oracle_rng.normal();
    const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
    std::copy(next.begin(), next.end(), qin.begin());
    std::copy(samp.action.begin(), samp.action.end(), qin.begin() + 3);
    const double backup = std::min(nn::mlp_forward(sac.q1_target, qin)[0],
                                   nn::mlp_forward(sac.q2_target, qin)[0]) -
                          alpha * samp.log_prob;
    const double want =
        batch.rewards[i] + 0.97 * (batch.done_flags[i] ? 0.0 : 1.0) * backup;
    CHECK(y[i] == want);
  }
  // Terminal rows bootstrap nothing.
  CHECK(y[2] == batch.rewards[2]);

  RngStream rng0(77);
  const Vec y0 = bellman_target(batch, sac, 0.0, rng0);
  for (int i = 0; i < 5; ++i) CHECK(y0[i] == batch.rewards[i]);
}

// ---------------------------------------------------------------------------

TEST_CASE("weighted logmeanexp handles hand cases, shifts and huge inputs") {
  // Single sample: the weight cancels.
  {
    const double q[] = {3.5}, w[] = {2.0};
    CHECK(weighted_logmeanexp(q, w) == doctest::Approx(3.5).epsilon(1e-15));
  }
  // Constant weights reduce to logsumexp(q) - log K.
  {
    const double q[] = {1.0, 2.0, 3.0};
    const double w[] = {-0.7, -0.7, -0.7};
    const double want = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - std::log(3.0);
    CHECK(std::abs(weighted_logmeanexp(q, w) - want) < 1e-12);
  }
  // Shift invariance in q.
  {
    const double q[] = {0.3, -1.2, 2.7, 0.0};
    const double w[] = {0.1, 1.4, -0.3, 0.9};
    double qs[4];
    for (int k = 0; k < 4; ++k) qs[k] = q[k] + 10.0;
    CHECK(std::abs(weighted_logmeanexp(qs, w) - (weighted_logmeanexp(q, w) + 10.0)) < 1e-12);
  }
  // No overflow for large magnitudes in either direction.
  {
    const double q[] = {1000.0, 1001.0};
    const double w[] = {0.0, 0.0};
    const double want = 1001.0 + std::log((std::exp(-1.0) + 1.0) / 2.0);
    CHECK(std::abs(weighted_logmeanexp(q, w) - want) < 1e-9);
    const double qn[] = {-1000.0, -1001.0};
    CHECK(std::isfinite(weighted_logmeanexp(qn, w)));
  }
  const double one[] = {0.0};
  CHECK_THROWS_AS(weighted_logmeanexp(std::span<const double>(one, 0),
                                      std::span<const double>(one, 0)),
                  ShapeError);
}

TEST_CASE("regularizer with equal-weight proposals equals direct enumeration") {
  RngStream rng(5);
  const nn::MlpParams q = nn::mlp_init({4, 8, 1}, rng.split("q"));
  const int B = 3, K = 5;
  const Matrix states = random_matrix(B, 3, rng);
  const Matrix data_actions = random_matrix(B, 1, rng, 0.4);

  // Five fixed distinct actions per state, all carrying the same proposal
  // density: the soft maximum must match enumerating them directly.
  const double grid[K] = {-0.8, -0.4, 0.0, 0.4, 0.8};
  MuSamples mu;
  mu.per_state = K;
  mu.actions = Matrix(B * K, 1);
  mu.log_proposal.assign(B * K, -std::log(2.0));
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < K; ++k) mu.actions.at(i * K + k, 0) = grid[k];

  const double alpha = 1.3;
  const CqlRegStats stats = cql_regularizer_at(q, states, data_actions, mu, alpha, nullptr);

  double want = 0.0;
  Vec in(4);
  for (int i = 0; i < B; ++i) {
    std::copy(states.row(i), states.row(i) + 3, in.begin());
    double lse = 0.0;
    for (int k = 0; k < K; ++k) {
      in[3] = grid[k];
      lse += std::exp(nn::mlp_forward(q, in)[0]);
    }
    in[3] = data_actions.at(i, 0);
    const double q_data = nn::mlp_forward(q, in)[0];
    want += std::log(lse) - std::log(5.0) - q_data;
  }
  want = alpha * want / B;
  CHECK(std::abs(stats.value - want) < 1e-10);
  CHECK(std::abs(stats.value - alpha * stats.mean_gap) < 1e-12);
}

TEST_CASE("regularizer is exactly zero when alpha is zero or Q ignores the action") {
  RngStream rng(9);
  nn::MlpParams q = nn::mlp_init({5, 8, 1}, rng.split("q"));
  const nn::MlpParams policy = nn::mlp_init({3, 8, 4}, rng.split("p"), 0.01);
  const int B = 4;
  const Matrix states = random_matrix(B, 3, rng);
  const Matrix data_actions = random_matrix(B, 2, rng, 0.4);

  CqlConfig cfg;
  cfg.num_sampled_actions = 4;
  cfg.mu_mode = MuMode::kUniformMix;
  RngStream mu_rng = rng.split("mu");
  const MuSamples mu = draw_mu_samples(policy, states, cfg, mu_rng);

  // alpha == 0: value exactly 0, gradients untouched.
  {
    nn::MlpGrads g;
    g.init_like(q);
    Vec targets(B, 0.5);
    q_regression_loss(q, states, data_actions, targets, &g);  // make them non-zero
    const nn::MlpGrads before = g;
    Vec dq;
    const CqlRegStats stats = cql_regularizer_at(q, states, data_actions, mu, 0.0, &g, &dq);
    CHECK(stats.value == 0.0);
    CHECK(grads_equal(g, before));
    CHECK(dq.size() == static_cast<std::size_t>(B));  // dataset Q still reported
  }
  // Action-blind critic: zero the first-layer action columns.
  {
    for (int r = 0; r < q.weights[0].rows; ++r)
      for (int c = 3; c < 5; ++c) q.weights[0].at(r, c) = 0.0;
    const CqlRegStats stats = cql_regularizer_at(q, states, data_actions, mu, 2.5, nullptr);
    CHECK(stats.value == 0.0);
    CHECK(stats.mean_gap == 0.0);
  }
}

TEST_CASE("uniform-mix proposals follow the pinned layout and densities") {
  RngStream rng(13);
  const nn::MlpParams policy = nn::mlp_init({3, 8, 4}, rng.split("p"), 0.01);
  const Matrix states = random_matrix(3, 3, rng);
  CqlConfig cfg;
  cfg.num_sampled_actions = 5;
  cfg.mu_mode = MuMode::kUniformMix;
  RngStream r1 = rng.split("mu");
  RngStream r2 = r1;
  const MuSamples mu = draw_mu_samples(policy, states, cfg, r1);
  CHECK(mu.per_state == 5);
  CHECK(mu.actions.rows == 15);

  // Mirror the draw order: two uniform rows, then policy samples.
  const double log_uniform = -2.0 * std::log(2.0);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 2; ++k) {
      for (int j = 0; j < 2; ++j) {
        const double a = r2.uniform(-1.0, 1.0);
        CHECK(mu.actions.at(i * 5 + k, j) == a);
      }
      CHECK(mu.log_proposal[i * 5 + k] == log_uniform);
    }
    const nn::GaussianHead head = nn::head_from_output(
        nn::mlp_forward(policy, std::span<const double>(states.row(i), 3)));
    Vec eps(2);
    for (int k = 2; k < 5; ++k) {
      for (int j = 0; j < 2; ++j) eps[j] = r2.normal();
      const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
      for (int j = 0; j < 2; ++j) CHECK(mu.actions.at(i * 5 + k, j) == samp.action[j]);
      CHECK(mu.log_proposal[i * 5 + k] == samp.log_prob);
    }
  }

  // current_policy mode: every row is a policy sample.
  cfg.mu_mode = MuMode::kCurrentPolicy;
  RngStream r3 = rng.split("mu2");
  const MuSamples mu2 = draw_mu_samples(policy, states, cfg, r3);
  for (std::size_t k = 0; k < mu2.log_proposal.size(); ++k)
    CHECK(mu2.log_proposal[k] != log_uniform);
}

// ---------------------------------------------------------------------------

TEST_CASE("critic loss gradients pass finite-difference checks") {
  RngStream rng(31);
  const nn::MlpParams q = nn::mlp_init({5, 8, 1}, rng.split("q"));
  const nn::MlpParams policy = nn::mlp_init({3, 8, 4}, rng.split("p"), 0.01);
  const int B = 4;
  const Matrix states = random_matrix(B, 3, rng);
  const Matrix actions = random_matrix(B, 2, rng, 0.4);
  Vec targets(B);
  for (int i = 0; i < B; ++i) targets[i] = rng.normal();

  CqlConfig cfg;
  cfg.num_sampled_actions = 4;
  cfg.mu_mode = MuMode::kUniformMix;
  RngStream mu_rng = rng.split("mu");
  const MuSamples mu = draw_mu_samples(policy, states, cfg, mu_rng);

  // Regression + regularizer, the exact per-critic objective.
  const auto combined = [&](const nn::MlpParams& p, nn::MlpGrads* g) {
    const CqlRegStats r = cql_regularizer_at(p, states, actions, mu, 0.7, g);
    return r.value + q_regression_loss(p, states, actions, targets, g);
  };
  const auto rep = nn::gradcheck(q, combined, 1e-4);
  CHECK(rep.passed);

  const auto plain = [&](const nn::MlpParams& p, nn::MlpGrads* g) {
    return q_regression_loss(p, states, actions, targets, g);
  };
  CHECK(nn::gradcheck(q, plain, 1e-4).passed);
}

TEST_CASE("actor loss gradients pass finite-difference checks") {
  RngStream rng(37);
  const nn::MlpParams q1 = nn::mlp_init({5, 8, 1}, rng.split("q1"));
  const nn::MlpParams q2 = nn::mlp_init({5, 8, 1}, rng.split("q2"));
  const nn::MlpParams policy = nn::mlp_init({3, 8, 4}, rng.split("p"), 0.01);
  const int B = 6;
  const Matrix states = random_matrix(B, 3, rng);
  const Matrix noise = random_matrix(B, 2, rng);

  for (const double alpha : {0.0, 0.3}) {
    const auto loss = [&](const nn::MlpParams& p, nn::MlpGrads* g) {
      return sac_policy_loss(p, q1, q2, states, noise, alpha, g);
    };
    const auto rep = nn::gradcheck(policy, loss, 1e-4);
    CAPTURE(alpha);
    CAPTURE(rep.max_rel_error);
    CHECK(rep.passed);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("polyak updates track exactly and tau=1 copies the live net") {
  RngStream rng(41);
  nn::MlpParams live = nn::mlp_init({4, 6, 1}, rng.split("a"));
  nn::MlpParams target = nn::mlp_init({4, 6, 1}, rng.split("b"));
  const nn::MlpParams old_target = target;

  polyak_update(target, live, 0.3);
  double max_dev = 0.0;
  for (int l = 0; l < target.num_layers(); ++l) {
    for (std::size_t k = 0; k < target.weights[l].a.size(); ++k) {
      const double want = (1.0 - 0.3) * old_target.weights[l].a[k] + 0.3 * live.weights[l].a[k];
      max_dev = std::max(max_dev, std::abs(target.weights[l].a[k] - want));
    }
    for (std::size_t k = 0; k < target.biases[l].size(); ++k) {
      const double want = (1.0 - 0.3) * old_target.biases[l][k] + 0.3 * live.biases[l][k];
      max_dev = std::max(max_dev, std::abs(target.biases[l][k] - want));
    }
  }
  CHECK(max_dev == 0.0);

  polyak_update(target, live, 1.0);
  CHECK(max_param_diff(target, live) == 0.0);
}

// ---------------------------------------------------------------------------

TEST_CASE("sampled minibatches replay the seeded index draws") {
  const data::OfflineDataset ds = pendulum_dataset(2, 10);
  RngStream rng(55), oracle = RngStream(55);
  const QBatch b = sample_qbatch(ds, 6, rng);
  CHECK(b.size() == 6);
  for (int i = 0; i < 6; ++i) {
    const auto tr = ds.transition(oracle.uniform_index(ds.transition_count()));
    for (int j = 0; j < 3; ++j) CHECK(b.states.at(i, j) == tr.obs[j]);
    CHECK(b.actions.at(i, 0) == tr.action[0]);
    for (int j = 0; j < 3; ++j) CHECK(b.next_states.at(i, j) == tr.next_obs[j]);
    CHECK(b.rewards[i] == tr.reward);
    CHECK(b.done_flags[i] == (tr.done ? 1 : 0));
  }
  data::OfflineDataset empty;
  CHECK_THROWS_AS(sample_qbatch(empty, 4, rng), ConfigError);
}

TEST_CASE("discounted return-to-go matches hand values and a pow-based oracle") {
  // Hand case: rewards {1,-2,3} at gamma 0.5 give {0.75,-0.5,3} exactly.
  {
    data::Trajectory t;
    t.obs = Matrix(3, 3);
    t.actions = Matrix(3, 1);
    t.next_obs = Matrix(3, 3);
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) {
        t.obs.at(k, j) = k + 0.1 * j;
        t.next_obs.at(k, j) = (k + 1) + 0.1 * j;
      }
    t.rewards = {1.0, -2.0, 3.0};
    t.dones = {0, 0, 1};
    t.stage_ids = {1, 1, 1};
    t.episode_return = 1.0 + -2.0 + 3.0;
    std::vector<data::Trajectory> trajs;
    trajs.push_back(std::move(t));
    const data::OfflineDataset ds(data::make_bench_header("pendulum_swingup", 3, 1, "t"),
                                  std::move(trajs));
    const Vec g = dataset_mc_returns(ds, 0.5);
    CHECK(g.size() == 3);
    CHECK(g[0] == 0.75);
    CHECK(g[1] == -0.5);
    CHECK(g[2] == 3.0);
  }
  // Pendulum data against a forward pow sum.
  {
    const data::OfflineDataset ds = pendulum_dataset(2, 14);
    const double gamma = 0.9;
    const Vec g = dataset_mc_returns(ds, gamma);
    CHECK(g.size() == ds.transition_count());
    std::size_t flat = 0;
    double max_dev = 0.0;
    for (const auto& t : ds.trajectories()) {
      const int T = t.length();
      for (int i = 0; i < T; ++i, ++flat) {
        double want = 0.0;
        for (int k = i; k < T; ++k) want += std::pow(gamma, k - i) * t.rewards[k];
        max_dev = std::max(max_dev, std::abs(g[flat] - want));
      }
    }
    CHECK(max_dev < 1e-9);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("alpha zero makes the full update bit-for-bit plain sac") {
  const data::OfflineDataset ds = pendulum_dataset(1, 17);
  CqlConfig cfg;
  cfg.alpha_cql = 0.0;
  cfg.num_sampled_actions = 3;
  cfg.gamma = 0.95;
  cfg.polyak_tau = 0.1;
  cfg.lr_policy = cfg.lr_critic = cfg.lr_alpha = 1e-3;
  cfg.batch_size = 8;

  SacState a = make_sac_state(3, 1, {8}, RngStream(7));
  SacState b = a;
  RngStream batch_rng(23);
  const QBatch batch = sample_qbatch(ds, 8, batch_rng);

  RngStream ra(99);
  const SacUpdateStats st = cql_sac_update(a, batch, cfg, ra);
  CHECK(st.cql_reg == 0.0);

  // Plain SAC with the same draw schedule.
  RngStream rb(99);
  const Vec y = bellman_target(batch, b, cfg.gamma, rb);
  draw_mu_samples(b.policy, batch.states, cfg, rb);  // consumed either way
  const nn::AdamConfig copt{.lr = cfg.lr_critic};
  nn::MlpGrads g;
  g.init_like(b.q1);
  q_regression_loss(b.q1, batch.states, batch.actions, y, &g);
  nn::adam_step(b.q1, g, copt);
  g.init_like(b.q2);
  q_regression_loss(b.q2, batch.states, batch.actions, y, &g);
  nn::adam_step(b.q2, g, copt);
  Matrix noise(8, 1);
  for (int i = 0; i < 8; ++i) noise.at(i, 0) = rb.normal();
  nn::MlpGrads pg;
  pg.init_like(b.policy);
  double mean_log_pi = 0.0;
  sac_policy_loss(b.policy, b.q1, b.q2, batch.states, noise, b.alpha_ent(), &pg, &mean_log_pi);
  nn::adam_step(b.policy, pg, nn::AdamConfig{.lr = cfg.lr_policy});
  b.log_alpha += cfg.lr_alpha * (mean_log_pi + b.target_entropy);
  polyak_update(b.q1_target, b.q1, cfg.polyak_tau);
  polyak_update(b.q2_target, b.q2, cfg.polyak_tau);

  CHECK(max_param_diff(a.q1, b.q1) == 0.0);
  CHECK(max_param_diff(a.q2, b.q2) == 0.0);
  CHECK(max_param_diff(a.policy, b.policy) == 0.0);
  CHECK(max_param_diff(a.q1_target, b.q1_target) == 0.0);
  CHECK(max_param_diff(a.q2_target, b.q2_target) == 0.0);
  CHECK(a.log_alpha == b.log_alpha);
}

TEST_CASE("one regularized update keeps every stat finite and targets tracking") {
  const data::OfflineDataset ds = pendulum_dataset(1, 19);
  CqlConfig cfg;
  cfg.alpha_cql = 1.0;
  cfg.num_sampled_actions = 4;
  cfg.polyak_tau = 0.05;
  cfg.batch_size = 16;

  SacState sac = make_sac_state(3, 1, {8}, RngStream(29));
  RngStream batch_rng(31);
  RngStream update_rng(33);
  const QBatch batch = sample_qbatch(ds, 16, batch_rng);

  const SacState before = sac;
  const SacUpdateStats st = cql_sac_update(sac, batch, cfg, update_rng);
  CHECK(std::isfinite(st.bellman_loss));
  CHECK(std::isfinite(st.cql_reg));
  CHECK(std::isfinite(st.policy_loss));
  CHECK(std::isfinite(st.mean_log_pi));
  CHECK(st.alpha_ent > 0.0);
  CHECK(st.cql_reg != 0.0);

  // target' == (1-tau) * target + tau * live', coordinate for coordinate.
  double max_dev = 0.0;
  for (int l = 0; l < sac.q1_target.num_layers(); ++l)
    for (std::size_t k = 0; k < sac.q1_target.weights[l].a.size(); ++k) {
      const double want = (1.0 - cfg.polyak_tau) * before.q1_target.weights[l].a[k] +
                          cfg.polyak_tau * sac.q1.weights[l].a[k];
      max_dev = std::max(max_dev, std::abs(sac.q1_target.weights[l].a[k] - want));
    }
  CHECK(max_dev == 0.0);

  // A few more updates stay finite and move the temperature.
  RngStream batch_rng2(35);
  for (int step = 0; step < 3; ++step) {
    const QBatch more = sample_qbatch(ds, 16, batch_rng2);
    const SacUpdateStats s2 = cql_sac_update(sac, more, cfg, update_rng);
    CHECK(std::isfinite(s2.policy_loss));
  }
  CHECK(sac.log_alpha != 0.0);
}

// ---------------------------------------------------------------------------

TEST_CASE("offline training is deterministic and rejects bad inputs") {
  const data::OfflineDataset ds = pendulum_dataset(1, 43);
  OfflineTrainConfig cfg;
  cfg.hidden = {8};
  cfg.grad_steps = 60;
  cfg.eval_every = 25;
  cfg.eval_episodes = 2;
  cfg.conserve_probe = 64;
  cfg.cql.batch_size = 8;
  cfg.cql.num_sampled_actions = 2;
  cfg.cql.alpha_cql = 1.0;

  env::PendulumEnv eval_env(0);
  const OfflineTrainResult r1 = train_offline(ds, cfg, 11, &eval_env);
  const OfflineTrainResult r2 = train_offline(ds, cfg, 11, &eval_env);
  REQUIRE(r1.rows.size() == 3);  // steps 25, 50, 60
  CHECK(r1.rows[0].grad_step == 25);
  CHECK(r1.rows[2].grad_step == 60);
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].mean_return == r2.rows[i].mean_return);
    CHECK(r1.rows[i].success_rate == r2.rows[i].success_rate);
    CHECK(r1.rows[i].mean_dataset_q == r2.rows[i].mean_dataset_q);
    CHECK(r1.rows[i].mean_mc_return == r2.rows[i].mean_mc_return);
    CHECK(r1.rows[i].bellman_loss == r2.rows[i].bellman_loss);
    CHECK(r1.rows[i].cql_reg == r2.rows[i].cql_reg);
    CHECK(r1.rows[i].policy_loss == r2.rows[i].policy_loss);
    CHECK(r1.rows[i].alpha_ent == r2.rows[i].alpha_ent);
    CHECK(std::isfinite(r1.rows[i].mean_return));
    CHECK(std::isfinite(r1.rows[i].mean_dataset_q));
  }
  CHECK(max_param_diff(r1.sac.policy, r2.sac.policy) == 0.0);
  CHECK(max_param_diff(r1.sac.q1, r2.sac.q1) == 0.0);
  CHECK(r1.final_mean_dataset_q == r2.final_mean_dataset_q);
  CHECK(r1.final_mean_mc_return == r2.final_mean_mc_return);

  // A different seed moves the parameters.
  const OfflineTrainResult r3 = train_offline(ds, cfg, 12, &eval_env);
  CHECK(max_param_diff(r1.sac.policy, r3.sac.policy) > 0.0);

  // Without an eval env the rollout columns are NaN, the rest is identical.
  const OfflineTrainResult r4 = train_offline(ds, cfg, 11, nullptr);
  CHECK(std::isnan(r4.rows[0].mean_return));
  CHECK(std::isnan(r4.rows[0].success_rate));
  CHECK(r4.rows[0].mean_dataset_q == r1.rows[0].mean_dataset_q);
  CHECK(max_param_diff(r1.sac.q1, r4.sac.q1) == 0.0);

  // Zero budget: fresh state, no rows, deterministic init.
  OfflineTrainConfig zero = cfg;
  zero.grad_steps = 0;
  const OfflineTrainResult z1 = train_offline(ds, zero, 11, nullptr);
  const OfflineTrainResult z2 = train_offline(ds, zero, 11, nullptr);
  CHECK(z1.rows.empty());
  CHECK(z1.grad_steps == 0);
  CHECK(z1.sac.policy.input_dim() == 3);
  CHECK(max_param_diff(z1.sac.policy, z2.sac.policy) == 0.0);

  data::OfflineDataset empty;
  CHECK_THROWS_AS(train_offline(empty, cfg, 1, nullptr), ConfigError);
  env::ReachEnv wrong(0);
  CHECK_THROWS_AS(train_offline(ds, cfg, 1, &wrong), ConfigError);
}

TEST_CASE("stronger conservatism pushes dataset q estimates down" * doctest::timeout(540)) {
  const data::OfflineDataset ds = pendulum_dataset(6, 47);
  OfflineTrainConfig cfg;
  cfg.hidden = {16, 16};
  cfg.grad_steps = 10'000;
  cfg.eval_every = 10'000;
  cfg.eval_episodes = 0;
  cfg.conserve_probe = 256;
  cfg.cql.batch_size = 16;
  cfg.cql.num_sampled_actions = 4;
  cfg.cql.mu_mode = MuMode::kUniformMix;

  Vec final_q;
  for (const double alpha : {0.0, 1.0, 10.0}) {
    OfflineTrainConfig run = cfg;
    run.cql.alpha_cql = alpha;
    const OfflineTrainResult r = train_offline(ds, run, 101, nullptr);
    CHECK(std::isfinite(r.final_mean_dataset_q));
    final_q.push_back(r.final_mean_dataset_q);
  }
  CHECK(final_q[0] >= final_q[1]);
  CHECK(final_q[1] >= final_q[2]);
}

// ---------------------------------------------------------------------------

TEST_CASE("q advantages equal the k-sample estimate drawn in the pinned order") {
  const PendulumRollout r = pendulum_rollout(2, 10, 61);
  RngStream rng(67);
  const nn::MlpParams q = nn::mlp_init({4, 8, 1}, rng.split("q"));
  const int K = 3;
  RngStream adv_rng = rng.split("adv");
  RngStream mirror = adv_rng;
  const Vec adv = q_advantages(q, r.batch, r.policy, K, adv_rng);

  const int B = r.batch.size();
  const Matrix q_data = nn::mlp_forward_batch(q, [&] {
    Matrix in(B, 4);
    for (int i = 0; i < B; ++i) {
      std::copy(r.batch.obs.row(i), r.batch.obs.row(i) + 3, in.row(i));
      in.at(i, 3) = r.batch.actions.at(i, 0);
    }
    return in;
  }());
  const Matrix raw = nn::mlp_forward_batch(r.policy, r.batch.obs);
  Vec eps(1);
  for (int i = 0; i < B; ++i) {
    const nn::GaussianHead head =
        nn::head_from_output(std::span<const double>(raw.row(i), 2));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) {
      eps[0] = mirror.normal();
      const nn::GaussianSample samp = nn::gaussian_sample(head, eps);
      Vec in = {r.batch.obs.at(i, 0), r.batch.obs.at(i, 1), r.batch.obs.at(i, 2),
                samp.action[0]};
      sum += nn::mlp_forward(q, in)[0];
    }
    const double want = q_data.at(i, 0) - sum / K;
    CHECK(std::abs(adv[i] - want) < 1e-12);
  }
}

TEST_CASE("on-policy critic loss with alpha zero is plain return regression") {
  const PendulumRollout r = pendulum_rollout(2, 20, 71);
  RngStream rng(73);
  const nn::MlpParams q = nn::mlp_init({4, 8, 1}, rng.split("q"));
  CqlConfig cfg;
  cfg.alpha_cql = 0.0;
  cfg.num_sampled_actions = 2;

  const std::vector<std::size_t> idx = {3, 1, 17, 9};
  nn::MlpGrads g1, g2;
  g1.init_like(q);
  g2.init_like(q);
  RngStream mu_rng(77);
  const double loss = cql_ppo_critic_loss(q, r.batch, idx, r.policy, cfg, mu_rng, &g1);

  Matrix gs(4, 3), ga(4, 1);
  Vec gy(4);
  for (int i = 0; i < 4; ++i) {
    std::copy(r.batch.obs.row(static_cast<int>(idx[i])),
              r.batch.obs.row(static_cast<int>(idx[i])) + 3, gs.row(i));
    ga.at(i, 0) = r.batch.actions.at(static_cast<int>(idx[i]), 0);
    gy[i] = r.batch.returns[idx[i]];
  }
  const double want = q_regression_loss(q, gs, ga, gy, &g2);
  CHECK(loss == want);
  CHECK(grads_equal(g1, g2));
}

TEST_CASE("on-policy critic loss gradients pass finite differences") {
  const PendulumRollout r = pendulum_rollout(2, 8, 79);
  RngStream rng(83);
  const nn::MlpParams q = nn::mlp_init({4, 8, 1}, rng.split("q"));
  CqlConfig cfg;
  cfg.alpha_cql = 0.5;
  cfg.num_sampled_actions = 3;
  std::vector<std::size_t> idx(r.batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  const RngStream base(87);

  const auto loss = [&](const nn::MlpParams& p, nn::MlpGrads* g) {
    RngStream mu_rng = base;  // same proposals every evaluation
    return cql_ppo_critic_loss(p, r.batch, idx, r.policy, cfg, mu_rng, g);
  };
  CHECK(nn::gradcheck(q, loss, 1e-4).passed);
}

TEST_CASE("fresh-policy surrogate is the same near-zero loss under gae and q advantages") {
  PendulumRollout r = pendulum_rollout(2, 40, 91);
  RngStream rng(93);
  const nn::MlpParams q = nn::mlp_init({4, 8, 1}, rng.split("q"));

  RolloutBatch gae = r.batch;
  normalize_advantages(gae.advantages);
  RolloutBatch viaq = r.batch;
  RngStream adv_rng = rng.split("adv");
  viaq.advantages = q_advantages(q, r.batch, r.policy, 3, adv_rng);
  normalize_advantages(viaq.advantages);

  PpoLossConfig lcfg;
  lcfg.free = free_dims(WaitPhase::kBoth, 1);
  std::vector<std::size_t> all(r.batch.size());
  std::iota(all.begin(), all.end(), 0);

  // The collecting policy gives ratios exactly 1, so either advantage vector
  // yields minus its mean, which normalization made (numerically) zero.
  const PpoLossStats a = ppo_policy_loss(r.policy, gae, all, lcfg, nullptr);
  const PpoLossStats b = ppo_policy_loss(r.policy, viaq, all, lcfg, nullptr);
  CHECK(a.max_ratio_dev == 0.0);
  CHECK(b.max_ratio_dev == 0.0);
  CHECK(std::abs(a.loss) < 1e-12);
  CHECK(std::abs(b.loss) < 1e-12);
  CHECK(std::abs(a.loss - b.loss) < 1e-12);
}

TEST_CASE("coupled update runs deterministically and trains the critic") {
  const PendulumRollout r = pendulum_rollout(2, 32, 95);
  PpoConfig ppo_cfg;
  ppo_cfg.epochs = 2;
  ppo_cfg.minibatch = 16;
  ppo_cfg.lr = 1e-3;
  CqlConfig cql_cfg;
  cql_cfg.alpha_cql = 0.5;
  cql_cfg.num_sampled_actions = 2;
  cql_cfg.lr_critic = 1e-2;

  nn::MlpParams q1 = nn::mlp_init({4, 8, 1}, RngStream(97));
  nn::MlpParams p1 = r.policy;
  const CqlPpoStats s1 = cql_ppo_update(r.batch, q1, p1, ppo_cfg, cql_cfg, 311);

  nn::MlpParams q2 = nn::mlp_init({4, 8, 1}, RngStream(97));
  nn::MlpParams p2 = r.policy;
  const CqlPpoStats s2 = cql_ppo_update(r.batch, q2, p2, ppo_cfg, cql_cfg, 311);

  CHECK(s1.critic_loss == s2.critic_loss);
  CHECK(s1.cql_reg == s2.cql_reg);
  CHECK(s1.policy.loss == s2.policy.loss);
  CHECK(max_param_diff(q1, q2) == 0.0);
  CHECK(max_param_diff(p1, p2) == 0.0);
  CHECK(std::isfinite(s1.critic_loss));
  CHECK(std::isfinite(s1.policy.mean_kl));

  // The critic steps moved Q toward the stored returns.
  nn::MlpParams q0 = nn::mlp_init({4, 8, 1}, RngStream(97));
  std::vector<std::size_t> all(r.batch.size());
  std::iota(all.begin(), all.end(), 0);
  Matrix in(r.batch.size(), 4);
  for (int i = 0; i < r.batch.size(); ++i) {
    std::copy(r.batch.obs.row(i), r.batch.obs.row(i) + 3, in.row(i));
    in.at(i, 3) = r.batch.actions.at(i, 0);
  }
  const Matrix pred0 = nn::mlp_forward_batch(q0, in);
  const Matrix pred1 = nn::mlp_forward_batch(q1, in);
  double err0 = 0.0, err1 = 0.0;
  for (int i = 0; i < r.batch.size(); ++i) {
    err0 += std::pow(pred0.at(i, 0) - r.batch.returns[i], 2);
    err1 += std::pow(pred1.at(i, 0) - r.batch.returns[i], 2);
  }
  CHECK(err1 < err0);
}

TEST_CASE("coupled stage training mirrors the online loop") {
  auto make_envs = [] {
    std::vector<std::unique_ptr<env::RlEnv>> list;
    for (int i = 0; i < 2; ++i) list.push_back(std::make_unique<env::PendulumEnv>(0));
    return env::VecEnv(std::move(list), 411);
  };
  PpoConfig ppo_cfg;
  ppo_cfg.num_envs = 2;
  ppo_cfg.horizon = 16;
  ppo_cfg.epochs = 2;
  ppo_cfg.minibatch = 16;
  ppo_cfg.hidden = {8};
  ppo_cfg.total_env_steps = 64;
  CqlConfig cql_cfg;
  cql_cfg.alpha_cql = 0.5;
  cql_cfg.num_sampled_actions = 2;

  env::VecEnv envs1 = make_envs();
  const CqlPpoTrainResult r1 = train_stage_cqlppo(envs1, ppo_cfg, cql_cfg, 421);
  REQUIRE(r1.rows.size() == 2);
  CHECK(r1.env_steps == 64);
  CHECK(r1.iterations == 2);
  CHECK(r1.rows[0].phase == wait_phase_name(WaitPhase::kBoth));
  CHECK(std::isfinite(r1.rows[0].kl));
  CHECK(r1.q.input_dim() == 4);

  env::VecEnv envs2 = make_envs();
  const CqlPpoTrainResult r2 = train_stage_cqlppo(envs2, ppo_cfg, cql_cfg, 421);
  CHECK(max_param_diff(r1.policy, r2.policy) == 0.0);
  CHECK(max_param_diff(r1.q, r2.q) == 0.0);
  CHECK(max_param_diff(r1.value, r2.value) == 0.0);
  for (std::size_t i = 0; i < r1.rows.size(); ++i) CHECK(r1.rows[i].kl == r2.rows[i].kl);

  // Wait-phase schedules belong to the plain trainer.
  env::VecEnv envs3 = make_envs();
  PpoConfig locked = ppo_cfg;
  locked.schedule = {WaitPhase::kLockLeft, WaitPhase::kBoth};
  CHECK_THROWS_AS(train_stage_cqlppo(envs3, locked, cql_cfg, 1), ConfigError);

  env::VecEnv envs4 = make_envs();
  PpoConfig wrong = ppo_cfg;
  wrong.num_envs = 3;
  CHECK_THROWS_AS(train_stage_cqlppo(envs4, wrong, cql_cfg, 1), ConfigError);
}
