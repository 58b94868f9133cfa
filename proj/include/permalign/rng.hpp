#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace permalign {

// Counter-based SplitMix64 stream. Every shuffle and random draw in the
// toolkit goes through this generator so that orderings are reproducible
// from (seed, context) alone and can be matched by other implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % bound;
  }

 private:
  std::uint64_t state_;
};

// Mixes a seed with a context tag (e.g. epoch number) into a fresh stream key.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  SplitMix64 g(seed ^ (0x9e3779b97f4a7c15ull + tag * 0xbf58476d1ce4e5b9ull));
  return g.next();
}

// Fisher-Yates over [0, n) driven by a SplitMix64 stream.
inline std::vector<int> shuffled_indices(int n, std::uint64_t key) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 g(key);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(g.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

}  // namespace permalign
