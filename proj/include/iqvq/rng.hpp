#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace iqvq {

/// Seeded RNG with hand-rolled distributions so that streams are
/// bit-reproducible regardless of the standard library's distribution
/// implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Uniform integer in [a, b] inclusive.
    int uniform_int(int a, int b) {
        const std::uint64_t span = static_cast<std::uint64_t>(b - a) + 1;
        return a + static_cast<int>(engine_() % span);
    }

    /// Standard normal via Box-Muller; draws two uniforms per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace iqvq
