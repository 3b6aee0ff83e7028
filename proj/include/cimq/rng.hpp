#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cimq {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed of a named sub-stream ("data", "init", "variation", "training", ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept
{
    return mix64(root ^ mix64(fnv1a64(stream)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) noexcept
{
    return mix64(root ^ mix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

}  // namespace cimq
