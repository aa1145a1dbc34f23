#pragma once
// Shared basics: error type, deterministic RNG streams, small numeric helpers.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace phasegen {

// All validation and runtime failures surface as this exception.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG streams.
//
// A single experiment seed fans out into named substreams so that each stage
// draws from its own independent, reproducible sequence. Stream derivation is
// a fixed FNV-1a hash of the stream name mixed with the base seed, so the
// mapping is stable across runs and platforms.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the xor of both inputs
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream) {
    return mix_seed(base, fnv1a64(stream));
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t index) {
    return mix_seed(derive_seed(base, stream), index);
}

/// A seeded random stream with the distributions the toolkit needs.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

    double normal() { return normal_(gen_); }
    double uniform() { return uniform_(gen_); }  // [0, 1)
    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
    }
    uint64_t next_u64() { return gen_(); }

    uint64_t seed() const { return seed_; }

    /// Independent stream derived from this stream's seed and a name.
    Rng substream(std::string_view name) const {
        return Rng(derive_seed(seed_, name));
    }
    Rng substream(std::string_view name, uint64_t index) const {
        return Rng(derive_seed(seed_, name, index));
    }

    std::mt19937_64& engine() { return gen_; }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

inline constexpr double kPi = 3.14159265358979323846;

template <typename T>
T clamp(T v, T lo, T hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace phasegen
