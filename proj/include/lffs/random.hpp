#pragma once

#include <cstdint>
#include <random>

namespace lffs {

/// The single generator type behind every random draw.
using Rng = std::mt19937_64;

/// Independent seed for a sub-stream (episode index, stage id, ...), so a
/// run's randomness does not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace lffs
