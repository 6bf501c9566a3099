#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace randprune {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Hashes a base seed together with a path of keys (stage, candidate, layer, ...)
/// into an independent stream seed. Streams depend only on the key path, never on
/// the order in which they are requested.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(base);
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(base, keys));
}

/// Uniform draw strictly inside (0, 1), 53-bit resolution.
inline double uniform_open01(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

// Stream tags used when deriving seeds.
namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t dense = 2;
inline constexpr std::uint64_t candidates = 3;
inline constexpr std::uint64_t emep = 4;
inline constexpr std::uint64_t finetune = 5;
}  // namespace stream

}  // namespace randprune
