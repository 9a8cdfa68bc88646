#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace splitnn {

// Deterministic random source.
//
// Core engine is std::mt19937_64, whose output sequence is pinned down by the
// C++ standard, seeded through a splitmix64 scrambler. All derived draws
// (uniform doubles, normals, permutations) are implemented here on top of the
// raw 64-bit stream instead of the standard <random> distributions, so the
// byte-for-byte draw sequence depends only on the seed, not on the standard
// library in use.
//
// Uniform doubles take the top 53 bits of a draw: (x >> 11) * 2^-53.
// Normals use the Marsaglia polar method with a cached spare.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(scramble(seed)) {}

  // Independent stream derived from (seed, stream). Used to give data
  // shuffling, weight init and channel noise unrelated sequences from one
  // master seed.
  static Rng derive(uint64_t seed, uint64_t stream) {
    return Rng(scramble(seed) ^ scramble(stream * 0x9e3779b97f4a7c15ull + 0x243f6a8885a308d3ull));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1. Rejection sampling, no modulo bias.
  int uniform_int(int n) {
    const uint64_t bound = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= bound);
    return static_cast<int>(x % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal draw, Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      std::swap(p[i], p[uniform_int(i + 1)]);
    }
    return p;
  }

  // Exact state round-trip for checkpointing.
  std::string serialize() const;
  void restore(const std::string& s);

 private:
  static uint64_t scramble(uint64_t x) {
    // splitmix64 finalizer.
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace splitnn
