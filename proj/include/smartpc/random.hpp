#pragma once

#include <cstdint>
#include <random>

namespace smartpc {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent sub-seeds from one
/// root seed so every random stream in a run traces back to it.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL));
}

/// Uniform double in [0, 1) from a counter-addressed hash; stateless.
constexpr double hash_uniform(std::uint64_t seed, std::uint64_t counter) noexcept {
  return static_cast<double>(mix_seed(seed, counter) >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace smartpc
