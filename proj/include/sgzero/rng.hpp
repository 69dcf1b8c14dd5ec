#pragma once

#include <cstdint>
#include <random>

namespace sgz {

/// Independent generator for sub-stream `id` of a run seeded with `seed`.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32), 0x5ca1ab1eu};
  return std::mt19937_64(seq);
}

}  // namespace sgz
