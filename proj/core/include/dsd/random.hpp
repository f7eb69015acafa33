#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace dsd {

// Generator keyed by a tuple of 64-bit words; each word feeds the seed
// sequence as two 32-bit halves so no bits are dropped.
inline std::mt19937_64 keyed_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * keys.size());
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace dsd
