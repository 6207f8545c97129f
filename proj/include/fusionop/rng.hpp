#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace fusionop {

using Rng = std::mt19937_64;

/// Generator seeded from a list of 64-bit words through std::seed_seq, so
/// independent streams can be derived as (seed, purpose, index, ...).
inline Rng make_rng(std::initializer_list<std::uint64_t> words) {
  std::vector<std::uint32_t> seq;
  seq.reserve(words.size() * 2);
  for (auto w : words) {
    seq.push_back(static_cast<std::uint32_t>(w));
    seq.push_back(static_cast<std::uint32_t>(w >> 32));
  }
  std::seed_seq ss(seq.begin(), seq.end());
  return Rng(ss);
}

/// FNV-1a, used to give each named parameter array its own stream.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Stream purposes.
enum class Stream : std::uint64_t {
  init = 1,
  dropout = 2,
  shuffle = 3,
  data = 4,
  search = 5,
  check = 6,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace fusionop
