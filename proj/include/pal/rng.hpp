#pragma once

#include <cstdint>
#include <random>

namespace pal {

// splitmix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives the seed of an independent sub-stream. Every randomized stage owns
// a fixed stream id, so e.g. the epoch-e shuffle depends only on (seed, e);
// that is what makes checkpoint-resume replay the exact trajectory of an
// uninterrupted run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(seed ^ mix_seed(stream + 0x51ed2701ull));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(derive_seed(seed, stream));
}

// Stream ids. Keep values stable; they are part of run reproducibility.
namespace streams {
inline constexpr std::uint64_t kSynthetic = 1;
inline constexpr std::uint64_t kAnchorInit = 2;
inline constexpr std::uint64_t kOverlapSampler = 3;
inline constexpr std::uint64_t kGradCheck = 4;
inline constexpr std::uint64_t kShuffleBase = 1000;  // + epoch index
}  // namespace streams

}  // namespace pal
