// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace c4d {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

/// FNV-1a, used to key generators by parameter names and to hash configs.
inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based generator: every draw is a pure function of
/// (seed, stream, counter), so results never depend on call order.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix_keys(seed, stream)) {}

  constexpr std::uint64_t bits(std::uint64_t counter) const {
    return splitmix64(mix_keys(key_, counter));
  }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on the counter pair (2c, 2c+1).
  double normal(std::uint64_t counter) const {
    const double u1 = 1.0 - uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  CounterRng derive(std::uint64_t stream) const {
    CounterRng r(0);
    r.key_ = mix_keys(key_, stream ^ 0xa5a5a5a5a5a5a5a5ULL);
    return r;
  }

 private:
  std::uint64_t key_;
};

/// Sequential view over a CounterRng.
class RngStream {
 public:
  explicit RngStream(CounterRng rng) : rng_(rng) {}
  RngStream(std::uint64_t seed, std::uint64_t stream) : rng_(seed, stream) {}

  double uniform() { return rng_.uniform(counter_++); }
  double normal() { return rng_.normal(counter_++); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // rejection sampling keeps the draw exactly uniform
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    for (;;) {
      std::uint64_t b = rng_.bits(counter_++);
      if (b < limit) return b % n;
    }
  }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
};

}  // namespace c4d
