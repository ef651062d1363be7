#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace mixline {

// Counter-based splittable RNG built on splitmix64. Streams are derived by
// hashing a parent seed with string labels and integer indices, so adding a
// new consumer never perturbs existing streams. Identical seeds give
// identical sequences on every platform.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_label(std::uint64_t seed, std::string_view label) {
  // FNV-1a over the label folded into the seed.
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = h;
  return splitmix64(s);
}

inline std::uint64_t hash_index(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + index * 0xff51afd7ed558ccdULL);
  return splitmix64(s);
}

class RngStream {
 public:
  RngStream() : state_(0) {}
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  RngStream split(std::string_view label) const { return RngStream(hash_label(state_ ^ 0xa02bdbf7bb3c0a7ULL, label)); }
  RngStream split(std::string_view label, std::uint64_t index) const {
    return RngStream(hash_index(hash_label(state_ ^ 0xa02bdbf7bb3c0a7ULL, label), index));
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  std::uint64_t state() const { return state_; }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // i in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (pairwise, second value cached).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace mixline
