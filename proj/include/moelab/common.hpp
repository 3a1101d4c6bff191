#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace moelab {

// FNV-1a, used for artifact digests and run ids. Not cryptographic; collisions
// are acceptable for desk-scale manifest checking.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Deterministic sub-seed derivation: every RNG in the project is seeded from
// an explicit (seed, tag) pair so runs are reproducible stream by stream.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
  uint64_t h = fnv1a64(tag);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

inline std::mt19937_64 make_rng(uint64_t seed, std::string_view tag) {
  return std::mt19937_64(derive_seed(seed, tag));
}

}  // namespace moelab
