#pragma once

#include <array>
#include <cstdint>

namespace pulseformer {

/// xoshiro256** seeded through splitmix64. The stream depends only on the
/// seed and the call sequence, so it is identical on every platform; normal
/// variates use our own Box-Muller transform rather than <random>
/// distributions, whose output is implementation-defined.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "xoshiro256**/splitmix64";

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed);
  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Independent child stream derived from this one's next output.
  Rng split() { return Rng(next_u64()); }

 private:
  std::array<std::uint64_t, 4> s_{};
  std::uint64_t seed_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace pulseformer
