// Copyright (c) 2026 CAR contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace car {

/// Counter-based deterministic generator (splitmix64). The whole state is
/// (seed, counter), so streams can be derived and replayed cheaply and the
/// value sequence is identical across platforms for a given call sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), n >= 1. Multiply-high, no rejection loop.
  uint64_t next_below(uint64_t n) {
    return uint64_t((__uint128_t(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double next_gauss() {
    double u1 = next_unit();
    double u2 = next_unit();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Independent child stream; deterministic in (seed, stream id).
  Rng derive(uint64_t stream) const {
    return Rng(mix(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

}  // namespace car
