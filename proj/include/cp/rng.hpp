#pragma once

#include <cstdint>

namespace cp {

/// SplitMix64 (Steele, Lea, Flood 2014). Fixed algorithm so embeddings are
/// reproducible across platforms and standard libraries.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t state) : state_(state) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

 private:
  std::uint64_t state_;
};

/// Combines stream coordinates into one seed by chained SplitMix64 steps.
inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = SplitMix64(seed).next();
  h = SplitMix64(h ^ a).next();
  h = SplitMix64(h ^ b).next();
  return SplitMix64(h ^ c).next();
}

}  // namespace cp
