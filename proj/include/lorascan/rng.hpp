#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace lorascan {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Derives an independent stream key from (seed, index, tag) so distinct
// adapters and distinct tensors never share a stream.
inline uint64_t derive_stream_key(uint64_t seed, uint64_t index, uint64_t tag) {
    uint64_t s = seed;
    uint64_t a = splitmix64(s);
    s ^= index * 0xD1342543DE82EF95ull;
    uint64_t b = splitmix64(s);
    s ^= tag * 0xAF251AF3B0F025B5ull;
    uint64_t c = splitmix64(s);
    return a ^ (b << 1) ^ (c >> 1);
}

// Deterministic random stream. Avoids std::*_distribution on purpose: their
// output sequences are implementation-defined, while mt19937_64 itself and
// the arithmetic below are pinned by the standard.
class RandomStream {
public:
    explicit RandomStream(uint64_t key) : rng_(key) {}

    uint64_t next_u64() { return rng_(); }

    // uniform in [0, 1)
    double uniform() { return double(rng_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, bound), unbiased via rejection
    uint64_t uniform_int(uint64_t bound) {
        const uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const uint64_t x = rng_();
            if (x >= threshold) return (x - threshold) % bound;
        }
    }

    // standard normal via Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::mt19937_64 rng_;
    bool have_spare_ = false;
    double spare_ = 0;
};

}  // namespace lorascan
