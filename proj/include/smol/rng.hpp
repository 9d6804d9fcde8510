// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>

namespace smol {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Mixes a base seed with stream identifiers into an independent seed.
template <typename... Ids>
constexpr std::uint64_t derive_seed(std::uint64_t base, Ids... ids) {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(ids))), ...);
  return h;
}

}  // namespace smol
