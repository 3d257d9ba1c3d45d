#ifndef IVOL_CHAOS_HPP
#define IVOL_CHAOS_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"
#include "ivol/grid.hpp"
#include "ivol/paths.hpp"

namespace ivol {

// First-order chaos signal revealed to the insider:
//   Z = int_0^T0 beta(s) dB(s) + int_0^T0 int psi(s, zeta) compensated-jump
// beta must stay away from zero so the conditional law of Z keeps a Gaussian
// smoothing component at every time.
struct ChaosSpec {
    std::function<double(double)> beta;
    std::function<double(double, double)> psi; // (t, zeta); may be empty for none
    double horizon = 0.0;                      // T0

    double psi_at(double t, double zeta) const { return psi ? psi(t, zeta) : 0.0; }
};

struct SignalPaths {
    std::size_t n_scenarios = 0;
    Field z;                        // Z(t_k) on the base grid, k = 0..N
    std::vector<double> terminal;   // Z at the snapped T0, per scenario
};

namespace detail {

inline void validate_beta(const ChaosSpec& spec, const TimeGrid& grid) {
    if (!spec.beta) throw std::invalid_argument("ChaosSpec: beta callable is required");
    for (std::size_t k = 0; k <= grid.horizon_steps(); ++k) {
        const double b = spec.beta(grid.lattice_time(k));
        if (!std::isfinite(b))
            throw std::invalid_argument("ChaosSpec: beta must be finite on the grid");
    }
}

} // namespace detail

// True if psi vanishes at every lattice node and mark, or jumps are disabled.
// Downstream quadratures switch to Gaussian closed forms in that case.
inline bool signal_is_gaussian(const ChaosSpec& spec, const LevyModel& levy, const TimeGrid& grid) {
    if (!levy.has_jumps() || !spec.psi) return true;
    for (std::size_t k = 0; k <= grid.horizon_steps(); ++k)
        for (const auto& m : levy.marks)
            if (spec.psi(grid.lattice_time(k), m.zeta) != 0.0) return false;
    return true;
}

// Euler accumulation of the signal on the base grid; when T0 lies beyond T the
// driver is extended on the same dt lattice with the dedicated extension
// streams so that the base-grid increments stay untouched.
inline SignalPaths simulate_signal(const ChaosSpec& spec, const DriverPaths& paths,
                                   const TimeGrid& grid) {
    detail::validate_beta(spec, grid);
    if (std::abs(spec.horizon - grid.T0) > 1e-9)
        throw std::invalid_argument("simulate_signal: spec.horizon disagrees with grid.T0");

    SignalPaths sig;
    sig.n_scenarios = paths.n_scenarios;
    sig.z = Field(paths.n_scenarios, grid.N + 1);
    sig.terminal.resize(paths.n_scenarios);

    const bool jumps_on = paths.levy.has_jumps() && spec.psi != nullptr;
    const double comp_rate_scale = grid.dt;

    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        double z = 0.0;
        sig.z.at(s, 0) = 0.0;
        std::size_t jump_cursor = 0;
        const auto& js = paths.jumps[s];
        for (std::size_t k = 0; k < grid.N; ++k) {
            const double tk = grid.t[k];
            z += spec.beta(tk) * paths.db.at(s, k);
            if (jumps_on) {
                while (jump_cursor < js.size() && js[jump_cursor].step == k) {
                    z += spec.psi_at(js[jump_cursor].time, js[jump_cursor].mark);
                    ++jump_cursor;
                }
                z -= comp_rate_scale *
                     paths.levy.nu_integral([&](double zeta) { return spec.psi_at(tk, zeta); });
            }
            sig.z.at(s, k + 1) = z;
        }

        if (grid.ext_steps > 0) {
            CounterRng rng(paths.seed, s, stream::brownian_extension);
            const double sq = std::sqrt(grid.dt);
            std::vector<Jump> ext_jumps;
            if (jumps_on)
                detail::sample_scenario_jumps(ext_jumps, s, grid.ext_steps, grid.dt, grid.T, grid.N,
                                              paths.levy, paths.seed, stream::jumps_extension);
            std::size_t cursor = 0;
            for (std::size_t k = 0; k < grid.ext_steps; ++k) {
                const double tk = grid.T + grid.dt * static_cast<double>(k);
                z += spec.beta(tk) * sq * rng.next_normal();
                if (jumps_on) {
                    while (cursor < ext_jumps.size() && ext_jumps[cursor].step == grid.N + k) {
                        z += spec.psi_at(ext_jumps[cursor].time, ext_jumps[cursor].mark);
                        ++cursor;
                    }
                    z -= comp_rate_scale *
                         paths.levy.nu_integral([&](double zeta) { return spec.psi_at(tk, zeta); });
                }
            }
        }
        sig.terminal[s] = z;
    }
    return sig;
}

// Remaining second-moment contributions of the signal after time t:
//   V_B(t) = int_t^T0 beta^2(s) ds
//   V_N(t) = int_t^T0 int psi^2(s, zeta) nu(dzeta) ds
// Trapezoid quadrature on the dt lattice; the Gaussian part V_B drives the
// conditional-density formulas, so it needs better than O(dt) accuracy.
struct RemainingVariance {
    double v_b = 0.0;
    double v_n = 0.0;
};

inline RemainingVariance remaining_variance(const ChaosSpec& spec, const LevyModel& levy,
                                            const TimeGrid& grid, double t) {
    detail::validate_beta(spec, grid);
    const double t0 = grid.t0_snapped;
    if (t > t0 + 1e-12) throw std::invalid_argument("remaining_variance: t beyond the signal horizon");

    const auto first = static_cast<std::size_t>(std::llround(t / grid.dt));
    const std::size_t last = grid.horizon_steps();
    RemainingVariance rv;
    if (first >= last) return rv;

    const auto w = trapezoid_weights(first, last, grid.dt);
    for (std::size_t k = first; k <= last; ++k) {
        const double s = grid.lattice_time(k);
        const double wk = w[k - first];
        rv.v_b += wk * sqr(spec.beta(s));
        if (levy.has_jumps() && spec.psi)
            rv.v_n += wk * levy.nu_integral([&](double zeta) { return sqr(spec.psi_at(s, zeta)); });
    }
    return rv;
}

} // namespace ivol

#endif
