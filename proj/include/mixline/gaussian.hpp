#pragma once

#include <span>
#include <vector>

#include "mixline/linalg.hpp"

namespace mixline::nn {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kTanhEps = 1e-6;

// Diagonal Gaussian with tanh squashing; actions always land in (-1, 1).
struct GaussianHead {
  Vec mean;
  Vec log_std;  // clamped to [kLogStdMin, kLogStdMax] at construction
};

// Policy nets output 2*d values: means first, raw log-stds second.
GaussianHead head_from_output(std::span<const double> net_output);

struct GaussianSample {
  Vec action;      // tanh(z)
  Vec pre_squash;  // z = mean + exp(log_std) * noise
  double log_prob;
};

GaussianSample gaussian_sample(const GaussianHead& head, std::span<const double> noise);

// log pi(tanh(z)|s) evaluated from the stored pre-squash point, optionally
// restricted to a subset of dimensions (wait-training masks).
double gaussian_log_prob_z(const GaussianHead& head, std::span<const double> z,
                           const std::vector<int>* dims = nullptr);

// Closed-form KL(p || q) between the pre-squash Gaussians.
double gaussian_kl(const GaussianHead& p, const GaussianHead& q,
                   const std::vector<int>* dims = nullptr);

Vec deterministic_action(const GaussianHead& head);

}  // namespace mixline::nn
