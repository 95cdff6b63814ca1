#pragma once

#include <cstdint>
#include <random>

namespace cmseg {

/// SplitMix64 finaliser. Derives an independent per-item seed from a base
/// seed and an item index.
constexpr uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Portable random source. std::mt19937_64 is fully specified by the
/// standard; the standard distributions are not, so draws are built here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  /// Uniform integer in [lo, hi], unbiased.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(next());
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v = next();
    while (v >= limit) v = next();
    return lo + static_cast<int64_t>(v % span);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform float in [lo, hi) built from 24 random bits.
  float uniform_float(float lo, float hi) {
    const float u = static_cast<float>(next() >> 40) * 0x1.0p-24F;
    return lo + (hi - lo) * u;
  }

  /// Standard normal via Box-Muller on two 53-bit uniforms.
  double normal();

 private:
  std::mt19937_64 engine_;
};

}  // namespace cmseg
