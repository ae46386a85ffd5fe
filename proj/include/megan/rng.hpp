#pragma once

#include <cstdint>
#include <random>

namespace megan {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (base seed, entity id, stream tag).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t id, std::uint64_t stream = 0) {
  return mix64(mix64(base) ^ mix64(id + 0x632be59bd9b4e019ULL * (stream + 1)));
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::uint64_t id, std::uint64_t stream = 0) {
  return std::mt19937_64(derive_seed(base, id, stream));
}

}  // namespace megan
