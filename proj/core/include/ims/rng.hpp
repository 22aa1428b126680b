#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ims {

/// Derive an independent stream seed from a base seed and a purpose tag, so
/// that e.g. dataset noise and weight init never share a stream. FNV-1a over
/// the tag folded into a splitmix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : tag) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ull;
  }
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::string_view tag) {
  return std::mt19937_64(derive_seed(base, tag));
}

}  // namespace ims
