#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace attnkit {

// Deterministic random stream. std::uniform_real_distribution and
// std::shuffle are implementation-defined, so every draw here is derived
// from raw mt19937_64 output with fixed arithmetic; identical seeds give
// bitwise-identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [lo, hi). 53-bit mantissa resolution.
    double uniform(double lo, double hi) {
        const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
        return lo + (hi - lo) * u;
    }

    // Standard normal via Box-Muller. Stateless: both variates are drawn
    // every call and one is discarded, so the stream position is a pure
    // function of the call count.
    double normal() {
        double u1 = uniform(0.0, 1.0);
        while (u1 <= 0.0) u1 = uniform(0.0, 1.0);
        const double u2 = uniform(0.0, 1.0);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Unbiased index in [0, n) by rejection.
    std::size_t index(std::size_t n) {
        const std::uint64_t span = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r = gen_();
        while (r >= limit) r = gen_();
        return static_cast<std::size_t>(r % span);
    }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    // Textual engine state for checkpoints; round-trips exactly.
    std::string save_state() const;
    void restore_state(const std::string& text);

private:
    std::mt19937_64 gen_;
};

}  // namespace attnkit
