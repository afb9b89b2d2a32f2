#pragma once

// Seeded random streams. Every stochastic stage derives an independent
// substream from (seed, key...) so results do not depend on how work is
// split across workers. The engine is std::mt19937_64, whose output sequence
// is fixed by the standard; the normal and uniform transforms are written out
// here because the std:: distributions are implementation-defined.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace pflow {

struct RngSeed {
    std::uint64_t value = 0;
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class RandomStream {
public:
    explicit RandomStream(std::uint64_t state) : engine_(state) {}

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n)
    {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stream families used across stages, kept distinct so no two stages share draws.
enum class StreamTag : std::uint64_t {
    Trajectory = 1,
    InitialState = 2,
    LabelQuery = 3,
    LabelLatent = 4,
    TrainSplit = 5,
    TrainEpoch = 6,
    TrainInit = 7,
    SampleLatent = 8,
    EvalInitial = 9,
};

/// Stream keyed by the seed, a stage tag and a tuple of integers.
inline RandomStream substream(RngSeed seed, StreamTag tag, std::initializer_list<std::uint64_t> keys)
{
    std::uint64_t h = splitmix64(seed.value ^ splitmix64(static_cast<std::uint64_t>(tag)));
    for (const auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return RandomStream(h);
}

}  // namespace pflow
