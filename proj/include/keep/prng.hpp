#pragma once

// Deterministic PRNG streams. Every random quantity in the project is drawn
// from a named splitmix64 stream so that identical (seed, name) pairs produce
// identical bytes on every run. Gaussians use the Irwin-Hall sum-of-12
// approximation: arithmetic only, no libm, so the values are stable across
// platforms that share IEEE-754 single/double semantics.

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace keep {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // Warm up so that low-entropy seeds (0, 1, ...) decorrelate.
        splitmix64(state_);
        splitmix64(state_);
    }

    // Stream keyed on (seed, name). Used for weight tensors, clustering,
    // episode generation - anything that must be replayable by name.
    static Rng stream(std::uint64_t seed, std::string_view name) {
        std::uint64_t s = seed ^ fnv1a64(name);
        return Rng(s);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Uniform in [0, 1) with 53 bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Approximate standard normal (Irwin-Hall, 12 uniforms).
    double gaussian() {
        double acc = 0.0;
        for (int i = 0; i < 12; ++i) acc += next_double();
        return acc - 6.0;
    }

    double normal(double stddev) { return gaussian() * stddev; }

    std::vector<double> unit_vector(std::size_t dim) {
        std::vector<double> v(dim);
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (auto& x : v) {
                x = gaussian();
                norm2 += x * x;
            }
        } while (norm2 < 1e-12);
        double inv = 1.0 / std::sqrt(norm2);
        for (auto& x : v) x *= inv;
        return v;
    }

private:
    std::uint64_t state_;
};

}  // namespace keep
