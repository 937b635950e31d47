#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>
#include <vector>

namespace steerlab {

// splitmix64 finaliser; used to derive independent stream seeds from tuples.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (const auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::initializer_list<std::uint64_t> parts) { return Rng(hash_seed(parts)); }

// Fisher-Yates with our own index draw so the permutation does not depend on
// the standard library's shuffle implementation.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace steerlab
