// Portable random variates on top of std::mt19937_64.
//
// The standard distributions are implementation-defined, so seeded runs would
// differ between standard libraries. These helpers only rely on the engine,
// whose output sequence is fixed by the standard.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace fluidstore::rng {

using Engine = std::mt19937_64;

/// Uniform on [0, 1) with 53 random bits.
inline double uniform(Engine &eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine &eng, double lo, double hi) {
    return lo + (hi - lo) * uniform(eng);
}

/// Exponential with the given rate (> 0).
inline double exponential(Engine &eng, double rate) {
    return -std::log1p(-uniform(eng)) / rate;
}

/// Index drawn from a cumulative distribution whose last entry is the total mass.
inline std::size_t pick_cumulative(Engine &eng, std::span<const double> cumulative) {
    const double u = uniform(eng) * cumulative.back();
    for (std::size_t i = 0; i < cumulative.size(); ++i) {
        if (u < cumulative[i])
            return i;
    }
    return cumulative.size() - 1;
}

/// Split seed so that independent workers draw independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace fluidstore::rng
