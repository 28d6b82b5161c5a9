#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace pairaug {

/// splitmix64 step; used to expand seeds and derive sub-streams.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic PRNG (xoshiro256++). The generator and every
/// distribution transform below are pinned by this implementation, so
/// streams are reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection-free is not needed here; the
  /// slight modulo bias is irrelevant for n far below 2^64, but we use
  /// rejection anyway so the stream is exactly unbiased.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller. The spare value is cached, so a
  /// stream of normals consumes one uniform pair per two draws.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Derives an independent child stream; keyed so that distinct
  /// (label, index) pairs never collide in practice.
  Rng child(uint64_t key) {
    uint64_t mix = s_[0] ^ rotl(s_[2], 31) ^ (key * 0x9e3779b97f4a7c15ULL);
    uint64_t sm = mix;
    (void)splitmix64(sm);
    return Rng(splitmix64(sm));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stateless stream derivation: child seed for (root seed, label, index).
/// Stages use this to hand each record its own generator so that
/// record-level work can run in any order without changing results.
inline uint64_t derive_seed(uint64_t root, const std::string& label, uint64_t index = 0) {
  uint64_t h = root ^ 0x5851f42d4c957f2dULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  h ^= index + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  uint64_t sm = h;
  (void)splitmix64(sm);
  return splitmix64(sm);
}

}  // namespace pairaug
