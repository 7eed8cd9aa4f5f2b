#pragma once

#include <cstdint>
#include <cmath>

namespace qrobust {

// Counter-free SplitMix64 generator. Hand-rolled so that every stochastic
// result in the toolkit is reproducible bit-for-bit across standard-library
// versions and platforms; <random> distributions give no such guarantee.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller. One value per call; the sibling value is
  // discarded to keep the draw count predictable.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
};

// Mixes a seed with up to three stream coordinates (layer index, epoch,
// sample index, ...) into an independent child seed.
inline uint64_t derive_stream(uint64_t seed, uint64_t a, uint64_t b = 0,
                              uint64_t c = 0) {
  auto mix = [](uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  uint64_t h = seed;
  h = mix(h ^ (a + 0x9e3779b97f4a7c15ULL));
  h = mix(h ^ (b + 0xd1b54a32d192ed03ULL));
  h = mix(h ^ (c + 0x8cb92ba72f3d8dd7ULL));
  return h;
}

}  // namespace qrobust
