#pragma once

#include <cmath>
#include <cstdint>

#include "ssllab/common.hpp"

namespace ssllab {

// SplitMix64 (Steele, Lea, Flood 2014). Chosen as the single PRNG of the
// project: stateless mixing, 64-bit counter friendly, and trivially
// reproducible across platforms. Every random fill in the library derives
// from this generator, so a fixed seed reproduces runs bit-exactly.
inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Collapses several stream identifiers (seed, item index, view index, ...)
/// into one 64-bit state.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  (void)splitmix64_next(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
  (void)splitmix64_next(s);
  return s;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64_next(state_); }

  /// Uniform double in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Integer in [0, n). n must be positive.
  int64_t next_below(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  /// Standard Box-Muller transform; the spare value is cached so draws come
  /// in a fixed order regardless of how they are consumed.
  double gaussian(double mean = 0.0, double std = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + std * spare_;
    }
    // u1 in (0,1] to keep log() finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + std * (r * std::cos(theta));
  }

  /// Normal clipped to +-2 std by rejection (transformer weight init).
  double trunc_gaussian(double std) {
    for (;;) {
      const double z = gaussian(0.0, std);
      if (std::abs(z) <= 2.0 * std) return z;
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<int64_t> shuffled_indices(int64_t n, uint64_t seed) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  RandomStream rs(mix_seed(seed, 0x5f1e575ull));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rs.next_below(i + 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

}  // namespace ssllab
