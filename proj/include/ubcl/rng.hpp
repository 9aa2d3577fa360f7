#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ubcl {

/// Project-wide random generator: xoshiro256** seeded through SplitMix64.
///
/// Normal variates use the Box–Muller transform (cosine branch only, one
/// pair of uniforms per draw) so that the stream consumed per normal sample
/// is fixed. Shuffling and integer draws are implemented here rather than
/// through <random> distributions, whose algorithms differ between standard
/// libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename U>
  void shuffle(std::vector<U>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

/// Child generator for stream `index` of `master_seed`.
///
/// seed = splitmix64(master_seed) XOR splitmix64(index + 0x9E3779B97F4A7C15),
/// then expanded to the full xoshiro state by SplitMix64.
Rng rng_derive(std::uint64_t master_seed, std::uint64_t index);

}  // namespace ubcl
