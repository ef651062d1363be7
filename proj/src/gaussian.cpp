#include "mixline/gaussian.hpp"

#include <algorithm>
#include <cmath>

#include "mixline/errors.hpp"

namespace mixline::nn {

namespace {
constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
}

GaussianHead head_from_output(std::span<const double> net_output) {
  if (net_output.size() % 2 != 0) throw ShapeError("gaussian head: output size must be 2*d");
  const std::size_t d = net_output.size() / 2;
  GaussianHead head;
  head.mean.assign(net_output.begin(), net_output.begin() + d);
  head.log_std.resize(d);
  for (std::size_t i = 0; i < d; ++i)
    head.log_std[i] = std::clamp(net_output[d + i], kLogStdMin, kLogStdMax);
  return head;
}

GaussianSample gaussian_sample(const GaussianHead& head, std::span<const double> noise) {
  if (noise.size() != head.mean.size()) throw ShapeError("gaussian_sample: noise length mismatch");
  const std::size_t d = head.mean.size();
  GaussianSample out;
  out.pre_squash.resize(d);
  out.action.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    out.pre_squash[i] = head.mean[i] + std::exp(head.log_std[i]) * noise[i];
    // tanh saturates to exactly +-1.0 for |z| > ~19; keep the open interval.
    out.action[i] = std::clamp(std::tanh(out.pre_squash[i]), -1.0 + 1e-12, 1.0 - 1e-12);
  }
  out.log_prob = gaussian_log_prob_z(head, out.pre_squash);
  return out;
}

double gaussian_log_prob_z(const GaussianHead& head, std::span<const double> z,
                           const std::vector<int>* dims) {
  if (z.size() != head.mean.size()) throw ShapeError("gaussian log_prob: length mismatch");
  double lp = 0.0;
  auto term = [&](int i) {
    const double sigma = std::exp(head.log_std[i]);
    const double u = (z[i] - head.mean[i]) / sigma;
    const double t = std::tanh(z[i]);
    lp += -0.5 * u * u - head.log_std[i] - 0.5 * kLogTwoPi - std::log(1.0 - t * t + kTanhEps);
  };
  if (dims) {
    for (int i : *dims) term(i);
  } else {
    for (std::size_t i = 0; i < z.size(); ++i) term(static_cast<int>(i));
  }
  return lp;
}

double gaussian_kl(const GaussianHead& p, const GaussianHead& q, const std::vector<int>* dims) {
  if (p.mean.size() != q.mean.size()) throw ShapeError("gaussian_kl: dimension mismatch");
  double kl = 0.0;
  auto term = [&](int i) {
    const double sp = std::exp(p.log_std[i]);
    const double sq = std::exp(q.log_std[i]);
    const double dm = p.mean[i] - q.mean[i];
    kl += q.log_std[i] - p.log_std[i] + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
  };
  if (dims) {
    for (int i : *dims) term(i);
  } else {
    for (std::size_t i = 0; i < p.mean.size(); ++i) term(static_cast<int>(i));
  }
  return kl;
}

Vec deterministic_action(const GaussianHead& head) {
  Vec a(head.mean.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    a[i] = std::clamp(std::tanh(head.mean[i]), -1.0 + 1e-12, 1.0 - 1e-12);
  return a;
}

}  // namespace mixline::nn
