#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "fsmfg/core.hpp"

namespace fsmfg {

/// Counter-based generator: output k of stream `key` is splitmix64(key + k*golden).
/// Streams are addressed by hashing a tuple of integers (seed, path, player, ...),
/// so any sub-stream can be regenerated without replaying the others.
class CounterRng {
public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}
  CounterRng(std::initializer_list<std::uint64_t> parts) : key_(hash(parts)) {}

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }
  int below(int n) { return static_cast<int>(uniform() * n); }

  /// Uniform sample from the simplex of dimension d (Dirichlet(1,...,1)).
  Vec simplex(int d);

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t hash(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243F6A8885A308D3ULL;
    for (std::uint64_t p : parts) h = mix(h ^ mix(p + 0x9E3779B97F4A7C15ULL));
    return h;
  }

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline Vec CounterRng::simplex(int d) {
  Vec w(static_cast<std::size_t>(d));
  double s = 0.0;
  for (double& v : w) {
    v = exponential(1.0);
    s += v;
  }
  for (double& v : w) v /= s;
  return w;
}

}  // namespace fsmfg
