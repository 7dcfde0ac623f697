#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "densestream/common.hpp"

// Self-contained pseudo-random machinery. The standard <random> engines are
// portable but the distributions are implementation-defined, which would break
// the bitwise-reproducibility contract across toolchains; everything here is
// pinned down to exact integer arithmetic.

namespace densestream {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Seed derivation used everywhere: child seed = mix(master, tag). Tags are
// human-readable strings such as "train/composite/96/fold2" so that partial
// reruns of any stage draw exactly the streams a full run would.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
  std::uint64_t s = master ^ fnv1a64(tag);
  splitmix64(s);
  return splitmix64(s);
}

// xoshiro256++ (Blackman & Vigna, public domain reference implementation).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0,1) with 53 random bits
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform integer in [0, n), rejection sampling (no modulo bias)
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw numeric_error("uniform_index: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  int uniform_int(int lo, int hi_exclusive) {
    return lo + static_cast<int>(uniform_index(static_cast<std::uint64_t>(hi_exclusive - lo)));
  }

  // standard normal, Box-Muller with cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // uniform inside the closed ball of given radius (rejection from the cube)
  Vec3 in_ball(double radius) {
    while (true) {
      Vec3 p{uniform(-1.0, 1.0), uniform(-1.0, 1.0), uniform(-1.0, 1.0)};
      if (p.x * p.x + p.y * p.y + p.z * p.z <= 1.0) return p * radius;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace densestream
