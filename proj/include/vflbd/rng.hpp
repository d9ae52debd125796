#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace vflbd {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a list of tags
// (round, adversary id, purpose, ...). Equal inputs give equal streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(base);
  for (auto t : tags) s = splitmix64(s ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(derive_seed(base, tags));
}

// Stream purpose tags.
enum SeedTag : std::uint64_t {
  kTagInit = 1,
  kTagBatch,
  kTagAux,
  kTagVae,
  kTagNoise,
  kTagPoison,
  kTagGenerate,
  kTagPlacement,
  kTagEval,
  kTagGraph,
  kTagClassifier,
  kTagSynthetic,
  kTagToy,
};

}  // namespace vflbd
