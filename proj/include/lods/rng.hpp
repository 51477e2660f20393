#pragma once

// Counter-based random streams. Every draw is a pure function of
// (seed, step, stream, counter), so two code paths that ask for the same key
// see the same numbers regardless of what else ran in between.

#include <cmath>
#include <cstdint>
#include <numbers>

#include "lods/gradcore.hpp"

namespace lods {

/// Fixed stream ids. New purposes get new ids; existing ids never change meaning.
enum class Stream : std::uint64_t {
  DistillTimestep = 1,
  DistillNoise = 2,
  AlignTimestep = 3,
  AlignNoise = 4,
  TrainBatch = 5,
  TrainTimestep = 6,
  TrainNoise = 7,
  TrainDropout = 8,
  Init = 9,
  Data = 10,
  MonteCarlo = 11,
  Generic = 12,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t step, Stream stream)
      : key_(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ static_cast<std::uint64_t>(stream))) {}
  CounterRng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream)
      : key_(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ stream)) {}

  std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do r = next_u64();
    while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  /// Standard normal via Box-Muller; both outputs are used.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class Scalar>
  Tensor<Scalar> normal_tensor(const Shape& shape) {
    Tensor<Scalar> t(shape);
    for (auto& v : t.data()) v = static_cast<Scalar>(normal());
    return t;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lods
