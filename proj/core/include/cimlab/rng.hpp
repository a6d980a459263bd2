#pragma once

// Seeded RNG used everywhere in the lab. Self-contained (splitmix64 core,
// Box-Muller normals) so that identical seeds give identical streams on any
// platform and standard library. std::normal_distribution is
// implementation-defined and would break cross-build replay.

#include <cmath>
#include <cstdint>

#include "cimlab/common.hpp"

namespace cimlab {

inline u64 mix64(u64 x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

/// Derives an independent stream id from a base seed and up to three labels.
/// Used for per-sample / per-scenario / per-source streams so results do not
/// depend on evaluation order.
inline u64 derive_stream(u64 seed, u64 a, u64 b = 0, u64 c = 0) {
  u64 h = mix64(seed + 0x9e3779b97f4a7c15ULL);
  h = mix64(h ^ (a + 0x9e3779b97f4a7c15ULL));
  h = mix64(h ^ (b + 0xbf58476d1ce4e5b9ULL));
  h = mix64(h ^ (c + 0x94d049bb133111ebULL));
  return h;
}

class Rng {
public:
  Rng() = default;
  explicit Rng(u64 seed) : state_(seed) {}

  void reseed(u64 seed) { state_ = seed; }

  u64 next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  /// Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log() argument.
  double uniform_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Consumes exactly two u64 draws.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  u64 below(u64 n) { return n == 0 ? 0 : next_u64() % n; }

private:
  u64 state_ = 0x853c49e6748fea9bULL;
};

enum class SourceKind { Neuron, Spatial, Scale, Affine, ScaleVI };

/// One hardware-analog randomness source. Layers never own RNG state; they
/// reference a source registered on the model, which lets tests count draws
/// and lets the scale-dropout single-module contract be enforced.
struct RngSource {
  SourceKind kind;
  Rng rng;
  u64 bernoulli_draws = 0;
  u64 normal_draws = 0;

  bool draw_bernoulli(double p) {
    ++bernoulli_draws;
    return rng.bernoulli(p);
  }
  double draw_normal() {
    ++normal_draws;
    return rng.normal();
  }
  double draw_uniform() {
    ++bernoulli_draws; // ternary affine draws are counted as Bernoulli-class events
    return rng.uniform();
  }
  void reset_counters() {
    bernoulli_draws = 0;
    normal_draws = 0;
  }
};

} // namespace cimlab
