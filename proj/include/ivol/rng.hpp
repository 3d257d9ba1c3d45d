#ifndef IVOL_RNG_HPP
#define IVOL_RNG_HPP

#include <cmath>
#include <cstdint>

#include "ivol/core.hpp"

namespace ivol {

// Counter-based random stream: every draw is a pure function of
// (seed, stream id, counter), so scenario i can be regenerated in isolation
// and parallel generation is bit-identical to serial generation.
//
// The mixer is splitmix64; streams are separated by hashing the ids into the
// starting state.
namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

} // namespace detail

class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t scenario, std::uint64_t stream_tag)
        : base_(detail::splitmix64(detail::splitmix64(seed ^ 0x5851F42D4C957F2DULL) ^
                                   detail::splitmix64(scenario * 0x9E3779B97F4A7C15ULL + stream_tag))),
          counter_(0) {}

    std::uint64_t next_u64() { return detail::splitmix64(base_ + 0xA0761D6478BD642FULL * ++counter_); }

    // Uniform on (0, 1]: never returns 0, so logs are safe.
    double next_uniform() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * (1.0 / 9007199254740992.0);
    }

    // One standard normal per call via Box-Muller (second branch discarded to
    // keep the draw count per sample fixed).
    double next_normal() {
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * pi_const * u2);
    }

    // Knuth product method; fine for the small per-step means used here.
    std::uint64_t next_poisson(double mu) {
        if (mu <= 0.0) return 0;
        const double limit = std::exp(-mu);
        std::uint64_t k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= next_uniform();
        } while (p > limit);
        return k - 1;
    }

private:
    std::uint64_t base_;
    std::uint64_t counter_;
};

// Stream tags: keep these stable, they are part of the reproducibility
// contract between paths and the signal extension beyond the base horizon.
namespace stream {
constexpr std::uint64_t brownian = 1;
constexpr std::uint64_t jumps = 2;
constexpr std::uint64_t brownian_extension = 3;
constexpr std::uint64_t jumps_extension = 4;
} // namespace stream

} // namespace ivol

#endif
