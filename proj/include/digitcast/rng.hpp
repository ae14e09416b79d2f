#pragma once

#include <cstdint>
#include <random>

namespace digitcast {

/// splitmix64 finalizer; used to turn (seed, stream ids) into well-mixed
/// engine seeds so that substreams are decorrelated by construction.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

/// Well-mixed 64-bit key from (seed, ids...); the basis of every substream.
template <typename... Ids>
uint64_t derive_seed(uint64_t seed, Ids... ids) {
    uint64_t s = mix64(seed);
    ((s = mix64(s ^ mix64(static_cast<uint64_t>(ids)))), ...);
    return s;
}

/// Counter-derived substream: same (seed, ids...) always yields the same
/// engine, independent of which thread or task asks for it.
template <typename... Ids>
Rng substream(uint64_t seed, Ids... ids) {
    return Rng(derive_seed(seed, ids...));
}

inline double uniform_real(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

/// Uniform integer in [lo, hi] inclusive.
inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace digitcast
