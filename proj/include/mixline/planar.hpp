#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mixline/errors.hpp"

namespace mixline::env {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

// Unit vector at angle phi.
inline Vec2 heading(double phi) { return {std::cos(phi), std::sin(phi)}; }
// 90-degree counterclockwise rotation of heading(phi).
inline Vec2 normal(double phi) { return {-std::sin(phi), std::cos(phi)}; }

// Wrap to (-pi, pi].
inline double wrap_angle(double a) {
  const double two_pi = 2.0 * M_PI;
  double w = std::remainder(a, two_pi);
  if (w <= -M_PI) w += two_pi;
  return w;
}

// Planar revolute chain: angles are relative to the previous link.
struct ChainPose {
  std::vector<Vec2> points;  // base, then one point per link end
  double orientation = 0.0;  // absolute angle of the last link
};

inline ChainPose chain_fk(Vec2 base, const std::vector<double>& link_lengths,
                          const std::vector<double>& angles) {
  if (angles.size() != link_lengths.size())
    throw ShapeError("chain_fk: angles/link count mismatch");
  ChainPose out;
  out.points.reserve(link_lengths.size() + 1);
  out.points.push_back(base);
  double phi = 0.0;
  Vec2 p = base;
  for (std::size_t i = 0; i < link_lengths.size(); ++i) {
    phi += angles[i];
    p = p + link_lengths[i] * heading(phi);
    out.points.push_back(p);
  }
  out.orientation = phi;
  return out;
}

// Closed-form 3-link IK for a target end-effector pose. Tries the requested
// elbow branch first, then the other; throws ConfigError when unreachable or
// outside joint limits on both branches.
inline std::array<double, 3> ik_3link(Vec2 base, const std::vector<double>& links,
                                      Vec2 target, double orientation, double joint_limit,
                                      double preferred_elbow = 1.0) {
  if (links.size() != 3) throw ShapeError("ik_3link: expected 3 links");
  const Vec2 wrist = target - links[2] * heading(orientation);
  const Vec2 d = wrist - base;
  const double r2 = dot(d, d);
  const double l1 = links[0], l2 = links[1];
  const double c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  if (c2 < -1.0 || c2 > 1.0) throw ConfigError("ik_3link: target out of reach");
  for (double sign : {preferred_elbow, -preferred_elbow}) {
    const double q2 = sign * std::acos(c2);
    const double q1 =
        std::atan2(d.y, d.x) - std::atan2(l2 * std::sin(q2), l1 + l2 * std::cos(q2));
    const double q3 = wrap_angle(orientation - q1 - q2);
    const std::array<double, 3> q{wrap_angle(q1), wrap_angle(q2), q3};
    bool ok = true;
    for (double a : q)
      if (std::abs(a) > joint_limit) ok = false;
    if (ok) return q;
  }
  throw ConfigError("ik_3link: no branch within joint limits");
}

}  // namespace mixline::env
