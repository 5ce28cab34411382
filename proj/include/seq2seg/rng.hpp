#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace seq2seg {

// Deterministic random source. Wraps std::mt19937_64 (whose sequence is fixed
// by the standard) and hand-rolls the distributions so results do not depend
// on the standard library build.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), state_hash_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) {
        return static_cast<int>(static_cast<uint64_t>(n) * uniform01());
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Standard normal via Box-Muller (one value per pair of uniforms; the
    // spare is discarded to keep the draw count per call fixed at exactly 2).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Normal(0, std) clipped by rejection to +/- 2 std.
    double truncated_normal(double std_dev) {
        for (;;) {
            double x = normal();
            if (std::fabs(x) <= 2.0) return x * std_dev;
        }
    }

    // Independent child stream; used for per-item parallel determinism.
    Rng derive(uint64_t stream_id) const {
        uint64_t x = state_hash_ ^ (stream_id + 0x9e3779b97f4a7c15ULL);
        x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27; x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return Rng(x);
    }

    void reseed(uint64_t seed) {
        engine_.seed(seed);
        state_hash_ = seed;
    }

private:
    std::mt19937_64 engine_;
    uint64_t state_hash_;
};

}  // namespace seq2seg
