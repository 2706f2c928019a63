#pragma once

#include <cstdint>
#include <random>

namespace wardrisk {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent substream for (seed, index); lets per-patient sampling run on
// any number of threads without changing the draws.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t mixed = splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  return std::mt19937_64(mixed);
}

}  // namespace wardrisk
