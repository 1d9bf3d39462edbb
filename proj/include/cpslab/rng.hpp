#pragma once

// Seeded random streams.
//
// Every stochastic decision in a run draws from an Rng obtained with
// derive(seed, tag, counter). Streams are keyed rather than shared, so
// adding a new consumer never shifts the draws seen by existing ones, and
// batch preparation can be replayed in any order.

#include <cstdint>
#include <random>
#include <string_view>

namespace cpslab {

using Rng = std::mt19937_64;

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t counter = 0) {
    return mix64(mix64(seed ^ hash_tag(tag)) + counter);
}

inline Rng derive(std::uint64_t seed, std::string_view tag, std::uint64_t counter = 0) {
    return Rng(derive_seed(seed, tag, counter));
}

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
    return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

inline bool coin(Rng& rng, double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

} // namespace cpslab
