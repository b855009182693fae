#pragma once

// SplitMix64 used as a counter-based generator: draw k of stream `seed` is
// mix(seed + (k + 1) * 0x9E3779B97F4A7C15). Every draw is a pure function of
// (seed, k), so scenes and initializations can be reproduced bit-exactly in
// any language. Doubles take the top 53 bits: (x >> 11) * 2^-53.

#include <cmath>
#include <cstdint>

namespace corrfield {

class SplitMix64 {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Draw number `counter` of this stream, independent of generator state.
  constexpr std::uint64_t at(std::uint64_t counter) const {
    return mix(seed_ + (counter + 1) * kGamma);
  }

  std::uint64_t next() { return at(counter_++); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] via floor of a uniform double.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const double span = static_cast<double>(hi - lo + 1);
    auto k = static_cast<std::int64_t>(std::floor(uniform() * span));
    if (k > hi - lo) k = hi - lo;
    return lo + k;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  // Independent child stream, e.g. one per parameter tensor.
  SplitMix64 fork(std::uint64_t salt) const {
    return SplitMix64(mix(seed_ ^ mix(salt + kGamma)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace corrfield
