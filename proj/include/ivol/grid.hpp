#ifndef IVOL_GRID_HPP
#define IVOL_GRID_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"

namespace ivol {

// Uniform grid on [0, T] with N steps plus the release horizon T0 of the
// anticipated signal.  T0 may lie beyond T; it is snapped onto the dt lattice
// so that every time quadrature in the library runs on one set of nodes.
struct TimeGrid {
    double T = 0.0;
    double T0 = 0.0;
    std::size_t N = 0;
    double dt = 0.0;
    std::vector<double> t;        // N + 1 nodes, t[0] = 0, t[N] = T
    std::size_t ext_steps = 0;    // lattice steps from T up to the snapped T0
    double t0_snapped = 0.0;      // effective horizon used by signal/quadrature
    bool t0_beyond_grid = false;

    double time(std::size_t k) const { return t[k]; }

    // Total lattice steps from 0 to the snapped T0.
    std::size_t horizon_steps() const { return N + ext_steps; }

    double lattice_time(std::size_t k) const { return dt * static_cast<double>(k); }
};

inline TimeGrid build_grid(double T, std::size_t N, double T0) {
    if (!(T > 0.0) || !std::isfinite(T)) throw std::invalid_argument("build_grid: T must be positive");
    if (N < 2) throw std::invalid_argument("build_grid: N must be at least 2");
    if (!(T0 > 0.0) || !std::isfinite(T0)) throw std::invalid_argument("build_grid: T0 must be positive");

    TimeGrid g;
    g.T = T;
    g.T0 = T0;
    g.N = N;
    g.dt = T / static_cast<double>(N);
    g.t.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) g.t[k] = g.dt * static_cast<double>(k);
    g.t[N] = T;

    if (T0 > T) {
        g.t0_beyond_grid = true;
        auto ext = static_cast<std::size_t>(std::llround((T0 - T) / g.dt));
        if (ext == 0) ext = 1;
        g.ext_steps = ext;
        g.t0_snapped = T + g.dt * static_cast<double>(ext);
    } else {
        const auto idx = static_cast<std::size_t>(std::llround(T0 / g.dt));
        g.ext_steps = 0;
        g.t0_snapped = g.dt * static_cast<double>(idx);
        if (idx == 0) throw std::invalid_argument("build_grid: T0 snaps to t = 0");
    }
    return g;
}

} // namespace ivol

#endif
