#pragma once

#include <cstdint>
#include <random>

namespace stmd {

/// Deterministic random stream. Uniform and normal transforms are defined
/// here rather than through <random> distributions, whose outputs differ
/// between standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Independent child stream derived from (seed, stream_id).
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace stmd
