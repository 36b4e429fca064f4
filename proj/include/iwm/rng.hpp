#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace iwm {

// Deterministic PRNG with in-house distributions. std::mt19937 is portable
// but the standard distributions are not bit-stable across stdlib
// implementations, so everything downstream of a seed goes through this.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate small consecutive seeds
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        // rejection-free Lemire reduction is overkill here; modulo bias is
        // negligible for n << 2^64 but we avoid it anyway
        uint64_t threshold = (~uint64_t{0} - uint64_t(n) + 1) % uint64_t(n);
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return int64_t(r % uint64_t(n));
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, no cached spare so the draw count is predictable
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

private:
    uint64_t state_;
};

// Stable key derivation: per-sample augmentation keys, per-op init keys, etc.
// hash_key(seed, epoch, index) must never depend on worker count or ordering.
inline uint64_t hash_key(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    auto mix = [](uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    uint64_t h = 0x243f6a8885a308d3ull;
    h = mix(h ^ (a + 0x9e3779b97f4a7c15ull));
    h = mix(h ^ (b + 0x9e3779b97f4a7c15ull));
    h = mix(h ^ (c + 0x9e3779b97f4a7c15ull));
    return h;
}

// FNV-1a, used for content hashes in checkpoints and determinism checks.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace iwm
