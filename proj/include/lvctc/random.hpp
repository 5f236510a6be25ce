#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lvctc {

using Rng = std::mt19937_64;

// Mixes a base seed with a tag into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (h | 1);  // splitmix64
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return derive_seed(base ^ (index * 0xD6E8FEB86659FD93ULL), "#index");
}

}  // namespace lvctc
