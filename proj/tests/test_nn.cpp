#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mixline/errors.hpp"
#include "mixline/gaussian.hpp"
#include "mixline/mlp.hpp"
#include "mixline/rng.hpp"

using namespace mixline;
using namespace mixline::nn;

namespace {

// Oracle: straightforward per-neuron evaluation, written independently of the
// batched path in mlp.cpp.
Vec naive_mlp_eval(const MlpParams& p, const Vec& input) {
  Vec cur = input;
  for (int l = 0; l < p.num_layers(); ++l) {
    Vec next(p.layer_sizes[l + 1], 0.0);
    for (int o = 0; o < p.layer_sizes[l + 1]; ++o) {
      double s = p.biases[l][o];
      for (int i = 0; i < p.layer_sizes[l]; ++i) s += p.weights[l].at(o, i) * cur[i];
      next[o] = (l + 1 < p.num_layers()) ? std::tanh(s) : s;
    }
    cur = next;
  }
  return cur;
}

// Oracle: scalar Adam, one parameter, tracked step by step.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  std::uint64_t t = 0;
  double step(double w, double g, double lr, double b1, double b2, double eps) {
    t += 1;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    return w - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

MlpParams random_net(const std::vector<int>& sizes, std::uint64_t seed) {
  RngStream rng(seed);
  MlpParams p = mlp_zeros(sizes);
  for (auto& w : p.weights)
    for (double& v : w.a) v = rng.normal() * 0.5;
  for (auto& b : p.biases)
    for (double& v : b) v = rng.normal() * 0.1;
  return p;
}

}  // namespace

TEST_CASE("mlp_forward: zero network maps any input to zero") {
  MlpParams p = mlp_zeros({4, 8, 2});
  Vec out = mlp_forward(p, Vec{0.3, -1.2, 0.5, 2.0});
  REQUIRE(out.size() == 2);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("mlp_forward: single linear identity layer passes input through") {
  MlpParams p = mlp_zeros({3, 3});
  for (int i = 0; i < 3; ++i) p.weights[0].at(i, i) = 1.0;
  Vec x{0.7, -0.2, 1.5};
  Vec out = mlp_forward(p, x);
  for (int i = 0; i < 3; ++i) CHECK(out[i] == x[i]);
}

TEST_CASE("mlp_forward: matches per-neuron oracle on a random 4-8-2 net") {
  MlpParams p = random_net({4, 8, 2}, 11);
  RngStream rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Vec x(4);
    for (double& v : x) v = rng.normal();
    Vec got = mlp_forward(p, x);
    Vec want = naive_mlp_eval(p, x);
    for (int i = 0; i < 2; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("mlp_forward: deterministic and shape-checked") {
  MlpParams p = random_net({4, 8, 2}, 3);
  Vec x{0.1, 0.2, 0.3, 0.4};
  Vec a = mlp_forward(p, x);
  Vec b = mlp_forward(p, x);
  CHECK(a == b);  // bitwise
  CHECK_THROWS_AS(mlp_forward(p, Vec{1.0, 2.0}), ShapeError);
}

TEST_CASE("mlp_backward: zero upstream gives zero parameter gradients") {
  MlpParams p = random_net({4, 8, 2}, 5);
  MlpGrads g;
  g.init_like(p);
  mlp_backward(p, Vec{1.0, -1.0, 0.5, 0.2}, Vec{0.0, 0.0}, g);
  for (const auto& m : g.dw)
    for (double v : m.a) CHECK(v == 0.0);
  for (const auto& b : g.db)
    for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("mlp_backward: scalar chain rule on a 1-1 linear net") {
  MlpParams p = mlp_zeros({1, 1});
  p.weights[0].at(0, 0) = 2.5;
  p.biases[0][0] = 0.7;
  MlpGrads g;
  g.init_like(p);
  Vec din = mlp_backward(p, Vec{3.0}, Vec{1.0}, g);
  CHECK(g.dw[0].at(0, 0) == 3.0);  // dw = x
  CHECK(g.db[0][0] == 1.0);        // db = 1
  CHECK(din[0] == 2.5);            // dx = w
}

TEST_CASE("mlp_backward: agrees with central finite differences on random 4-8-2 net") {
  MlpParams p = random_net({4, 8, 2}, 17);
  RngStream rng(18);
  Vec x(4), up(2);
  for (double& v : x) v = rng.normal();
  for (double& v : up) v = rng.normal();

  // Loss = up . f(x); its parameter gradient is what mlp_backward returns.
  auto loss = [&](const MlpParams& q, MlpGrads* grads) {
    Vec y = mlp_forward(q, x);
    if (grads) mlp_backward(q, x, up, *grads);
    return up[0] * y[0] + up[1] * y[1];
  };
  GradCheckReport rep = gradcheck(p, loss, 1e-4);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("gradcheck: exact on quadratic loss") {
  MlpParams p = random_net({3, 4, 2}, 23);
  auto loss = [](const MlpParams& q, MlpGrads* grads) {
    double s = 0.0;
    if (grads) grads->zero();
    for (std::size_t i = 0; i < q.num_coords(); ++i) {
      const double w = get_coord(q, i);
      s += 0.5 * w * w;
    }
    if (grads) {
      for (std::size_t l = 0; l < q.weights.size(); ++l) {
        grads->dw[l] = q.weights[l];
        grads->db[l] = q.biases[l];
      }
    }
    return s;
  };
  GradCheckReport rep = gradcheck(p, loss, 1e-9);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-9);
}

TEST_CASE("gradcheck: non-finite loss raises numeric error") {
  MlpParams p = random_net({2, 2}, 29);
  auto loss = [](const MlpParams&, MlpGrads*) { return std::nan(""); };
  CHECK_THROWS_AS(gradcheck(p, loss, 1e-4), NumericError);
}

TEST_CASE("adam_step: zero gradient with zero moments leaves parameters unchanged") {
  MlpParams p = random_net({3, 5, 1}, 31);
  MlpParams before = p;
  MlpGrads g;
  g.init_like(p);
  adam_step(p, g, {});
  CHECK(p.adam_t == 1);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    CHECK(p.weights[l].a == before.weights[l].a);
    CHECK(p.biases[l] == before.biases[l]);
  }
}

TEST_CASE("adam_step: first step matches the closed form") {
  MlpParams p = mlp_zeros({1, 1});
  p.weights[0].at(0, 0) = 1.0;
  MlpGrads g;
  g.init_like(p);
  g.dw[0].at(0, 0) = 1.0;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  adam_step(p, g, cfg);
  // mhat = vhat = 1 at t=1, so the decrease is lr / (1 + eps).
  CHECK(p.weights[0].at(0, 0) == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam_step: two identical steps match the scalar oracle") {
  MlpParams p = mlp_zeros({1, 1});
  p.weights[0].at(0, 0) = 0.3;
  MlpGrads g;
  g.init_like(p);
  g.dw[0].at(0, 0) = 1.0;
  AdamConfig cfg;
  cfg.lr = 1e-3;

  ScalarAdam oracle;
  double w = 0.3;
  w = oracle.step(w, 1.0, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  w = oracle.step(w, 1.0, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

  adam_step(p, g, cfg);
  adam_step(p, g, cfg);
  CHECK(p.weights[0].at(0, 0) == doctest::Approx(w).epsilon(1e-15));
  CHECK(p.adam_t == 2);
}

TEST_CASE("adam_step: non-finite gradient aborts with state preserved") {
  MlpParams p = random_net({2, 2}, 37);
  MlpParams before = p;
  MlpGrads g;
  g.init_like(p);
  g.dw[0].at(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_step(p, g, {}), NumericError);
  CHECK(p.adam_t == before.adam_t);
  CHECK(p.weights[0].a == before.weights[0].a);
}

TEST_CASE("gaussian_sample: analytic value at the origin") {
  GaussianHead head{{0.0}, {0.0}};
  GaussianSample s = gaussian_sample(head, Vec{0.0});
  CHECK(s.action[0] == 0.0);
  const double expected = -0.5 * std::log(2.0 * M_PI) - std::log(1.0 + 1e-6);
  CHECK(s.log_prob == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("gaussian_sample: zero noise gives tanh(mean)") {
  GaussianHead head{{0.7, -1.2}, {-0.3, 0.1}};
  GaussianSample s = gaussian_sample(head, Vec{0.0, 0.0});
  // volatile blocks compile-time folding of tanh, which can differ from libm by 1 ulp
  volatile double m0 = 0.7, m1 = -1.2;
  CHECK(s.action[0] == std::tanh(m0));
  CHECK(s.action[1] == std::tanh(m1));
  Vec det = deterministic_action(head);
  CHECK(det == s.action);
}

TEST_CASE("gaussian_sample: density integrates to one over the action interval (quadrature oracle)") {
  // d = 1: integrate p(a) da over (-1, 1) by evaluating log_prob on a fine z
  // grid and transforming with the tanh Jacobian already folded into log_prob:
  // integral of exp(log_prob(z)) da where da = (1 - tanh(z)^2) dz.
  GaussianHead head{{0.35}, {-0.4}};
  const int n = 200000;
  const double zlo = -9.0, zhi = 9.0;
  const double h = (zhi - zlo) / n;
  double integral = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = zlo + i * h;
    const double t = std::tanh(z);
    const double da_dz = 1.0 - t * t;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    integral += w * std::exp(gaussian_log_prob_z(head, Vec{z})) * da_dz * h;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("gaussian actions always lie strictly inside (-1, 1)") {
  RngStream rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    GaussianHead head{{rng.normal() * 3.0, rng.normal() * 3.0},
                      {rng.uniform(kLogStdMin, kLogStdMax), rng.uniform(kLogStdMin, kLogStdMax)}};
    Vec noise{rng.normal(), rng.normal()};
    GaussianSample s = gaussian_sample(head, noise);
    for (double a : s.action) {
      CHECK(a > -1.0);
      CHECK(a < 1.0);
    }
  }
}

TEST_CASE("gaussian_kl: zero iff identical, simple closed form") {
  GaussianHead p{{0.0}, {0.0}};
  GaussianHead q{{1.0}, {0.0}};
  CHECK(gaussian_kl(p, p) == 0.0);
  CHECK(gaussian_kl(p, q) == doctest::Approx(0.5).epsilon(1e-14));

  GaussianHead r{{0.2, -0.3}, {0.1, -0.2}};
  GaussianHead t{{0.2, -0.3}, {0.1, -0.1999}};
  CHECK(gaussian_kl(r, t) > 0.0);
}

TEST_CASE("gaussian_kl: matches Monte-Carlo estimate of E_p[log p - log q]") {
  GaussianHead p{{0.4, -0.8}, {-0.5, 0.3}};
  GaussianHead q{{-0.2, 0.1}, {0.2, -0.4}};
  const double exact = gaussian_kl(p, q);

  // MC over the pre-squash Gaussians (the KL is defined there; the tanh
  // change of variables cancels between log p and log q).
  auto log_norm = [](const GaussianHead& h, const Vec& z) {
    double lp = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double s = std::exp(h.log_std[i]);
      const double u = (z[i] - h.mean[i]) / s;
      lp += -0.5 * u * u - h.log_std[i] - 0.5 * std::log(2.0 * M_PI);
    }
    return lp;
  };
  RngStream rng(43);
  const int n = 1000000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec z(2);
    for (std::size_t d = 0; d < 2; ++d)
      z[d] = p.mean[d] + std::exp(p.log_std[d]) * rng.normal();
    const double v = log_norm(p, z) - log_norm(q, z);
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq / n - mean * mean) / n);
  CHECK(std::abs(mean - exact) < 3.0 * se + 1e-12);
}

TEST_CASE("checkpoint: write-then-read is byte-exact") {
  MlpParams p = random_net({4, 8, 2}, 47);
  MlpGrads g;
  g.init_like(p);
  for (auto& m : g.dw)
    for (double& v : m.a) v = 0.01;
  adam_step(p, g, {});  // non-trivial moments and t

  const std::string path1 = "ckpt_a.mxl1";
  const std::string path2 = "ckpt_b.mxl1";
  save_checkpoint(p, path1);
  MlpParams q = load_checkpoint(path1);
  save_checkpoint(q, path2);

  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());

  CHECK(q.layer_sizes == p.layer_sizes);
  CHECK(q.adam_t == p.adam_t);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    CHECK(q.weights[l].a == p.weights[l].a);
    CHECK(q.adam_m_w[l].a == p.adam_m_w[l].a);
    CHECK(q.adam_v_b[l] == p.adam_v_b[l]);
  }
  std::filesystem::remove(path1);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint: corrupted magic is rejected") {
  MlpParams p = random_net({2, 2}, 53);
  const std::string path = "ckpt_bad.mxl1";
  save_checkpoint(p, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
  std::filesystem::remove(path);
}

TEST_CASE("head_from_output clamps log_std into [-5, 2]") {
  Vec out{0.1, -0.2, -9.0, 7.0};
  GaussianHead h = head_from_output(out);
  CHECK(h.mean == Vec{0.1, -0.2});
  CHECK(h.log_std[0] == kLogStdMin);
  CHECK(h.log_std[1] == kLogStdMax);
}
