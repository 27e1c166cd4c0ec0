// Copyright (C) 2026 sdg authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace sdg {

/// All randomness in the project flows through mt19937_64 engines whose seeds
/// are derived from one root seed via named sub-streams. Sampling helpers are
/// deliberately stateless on top of the engine so that serializing the engine
/// captures the entire RNG state.
using Rng = std::mt19937_64;

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}
}  // namespace detail

/// Seed for the sub-stream `name` of the given root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
    return detail::splitmix64(root ^ detail::fnv1a(name));
}

/// Per-item seed used when fanning work out across workers.
inline std::uint64_t item_seed(std::uint64_t base, std::uint64_t index) {
    return detail::splitmix64(base ^ index);
}

/// Uniform double in [0, 1) using the top 53 bits of the engine output.
inline double rand_uniform(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller. Stateless: two engine draws per call.
inline double rand_normal(Rng& rng) {
    double u1 = rand_uniform(rng);
    double u2 = rand_uniform(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Uniform index in [0, n). Modulo bias is irrelevant at the sizes used here.
inline std::size_t rand_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(rng() % n);
}

/// Index drawn proportionally to the (non-negative) weights.
inline std::size_t sample_discrete(Rng& rng, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rand_uniform(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    return weights.size() - 1;
}

/// Fisher-Yates shuffle driven by rand_index, so the result depends only on
/// the engine state and not on the standard library's shuffle internals.
template <typename T>
void shuffle(Rng& rng, std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = rand_index(rng, i);
        std::swap(items[i - 1], items[j]);
    }
}

inline std::string rng_state_to_string(const Rng& rng) {
    std::ostringstream oss;
    oss << rng;
    return oss.str();
}

inline Rng rng_state_from_string(const std::string& s) {
    Rng rng;
    std::istringstream iss(s);
    iss >> rng;
    return rng;
}

}  // namespace sdg
