#pragma once

// Performance functional, directional derivatives, and optimality checks for
// the reduced control problem.  The objective is evaluated scenario-wise as
//
//     j(z) = E[ integral f(t, X, u, z) M(t, z) dt + g(X(T), z) M(T, z) ]
//
// and aggregated over a z-grid by trapezoid when the problem carries a real
// conditioning signal.  Everything downstream (Gateaux derivatives, the
// first-order condition, concavity probes, brute force search) reuses this
// single per-scenario statistic so that paired comparisons share noise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "ivol/adjoint.hpp"
#include "ivol/chaos.hpp"
#include "ivol/core.hpp"
#include "ivol/donsker.hpp"
#include "ivol/grid.hpp"
#include "ivol/paths.hpp"
#include "ivol/svie.hpp"

namespace ivol {

// Per-scenario weighted objective for one conditioning level.  The state must
// have been solved with the same control that is passed here; the control is
// re-evaluated along the grid to form the running cost.
inline std::vector<double> scenario_objective(const PerformanceSpec& perf,
                                              const DonskerField& field, double z,
                                              const ControlField& control, const StateField& state,
                                              const TimeGrid& grid) {
    const std::size_t n = state.x.n_scenarios;
    const auto w = trapezoid_weights(0, grid.N, grid.dt);
    std::vector<double> out(n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= grid.N; ++k) {
            const double uk = control.eval(k, z, s);
            acc += w[k] * perf.f_at(grid.t[k], state.x.at(s, k), uk, z) * field.density(k, z, s);
        }
        acc += perf.g_at(state.x.at(s, grid.N), z) * field.density(grid.N, z, s);
        out[s] = acc;
    }
    return out;
}

struct PerformanceReport {
    std::vector<double> z_nodes;
    std::vector<double> j;    // objective mean per conditioning level
    std::vector<double> j_se; // standard error of each mean
    double total = 0.0;       // z-trapezoid of j (j[0] for a single level)
    double total_se = 0.0;    // from per-scenario totals, honest under shared paths
};

// Objective across a grid of conditioning levels.  All levels share the same
// driver paths, so the z-aggregated total has a well-defined per-scenario
// value and its standard error accounts for the cross-level correlation.
inline PerformanceReport performance(const CoefficientSet& coeffs, const PerformanceSpec& perf,
                                     const DonskerField& field, const ControlField& control,
                                     const DriverPaths& paths, const TimeGrid& grid,
                                     std::span<const double> z_nodes) {
    if (z_nodes.empty()) throw std::invalid_argument("performance: empty z grid");
    const std::size_t n = paths.db.n_scenarios;
    PerformanceReport rep;
    rep.z_nodes.assign(z_nodes.begin(), z_nodes.end());

    std::vector<double> total(n, 0.0);
    std::vector<double> zw(z_nodes.size(), 1.0);
    if (z_nodes.size() > 1) {
        for (std::size_t i = 0; i + 1 < z_nodes.size(); ++i)
            if (z_nodes[i + 1] <= z_nodes[i])
                throw std::invalid_argument("performance: z grid must be increasing");
        for (std::size_t i = 0; i < z_nodes.size(); ++i) {
            double wl = (i > 0) ? z_nodes[i] - z_nodes[i - 1] : 0.0;
            double wr = (i + 1 < z_nodes.size()) ? z_nodes[i + 1] - z_nodes[i] : 0.0;
            zw[i] = 0.5 * (wl + wr);
        }
    }

    for (std::size_t i = 0; i < z_nodes.size(); ++i) {
        const double z = z_nodes[i];
        const StateField state = solve_forward(coeffs, control, z, paths, grid);
        const auto obj = scenario_objective(perf, field, z, control, state, grid);
        rep.j.push_back(mean(obj));
        rep.j_se.push_back(standard_error(obj));
        for (std::size_t s = 0; s < n; ++s) total[s] += zw[i] * obj[s];
    }
    rep.total = mean(total);
    rep.total_se = standard_error(total);
    return rep;
}

// Control shifted along a direction: u + a * beta, with bounds widened so the
// probe itself never trips the admissibility check.  Directions are plain
// control fields whose bounds are ignored.
inline ControlField shifted_control(const ControlField& u, const ControlField& direction,
                                    double a) {
    ControlField out;
    out.lo = -std::numeric_limits<double>::infinity();
    out.hi = std::numeric_limits<double>::infinity();
    out.u = [base = u.u, dir = direction.u, a](std::size_t k, double z, std::size_t s) {
        return base(k, z, s) + a * dir(k, z, s);
    };
    return out;
}

// Direction that keeps u +- max_step * beta inside the control bounds: the
// requested profile is damped near the boundary and vanishes on it.
inline ControlField make_admissible_direction(const ControlField& u, const ControlField& profile,
                                              double max_step) {
    if (!(max_step > 0.0)) throw std::invalid_argument("make_admissible_direction: step <= 0");
    ControlField out;
    out.lo = -std::numeric_limits<double>::infinity();
    out.hi = std::numeric_limits<double>::infinity();
    out.u = [base = u.u, prof = profile.u, lo = u.lo, hi = u.hi,
             max_step](std::size_t k, double z, std::size_t s) {
        const double v = base(k, z, s);
        const double b = prof(k, z, s);
        if (b == 0.0) return 0.0;
        const double room = std::min(hi - v, v - lo);
        if (!(room > 0.0)) return 0.0;
        const double cap = room / (max_step * std::abs(b));
        return b * std::min(1.0, cap);
    };
    return out;
}

struct GateauxEstimate {
    double variational = 0.0;    // via the linearized state equation
    double variational_se = 0.0;
    double finite_diff = 0.0;    // central difference of the objective
    double finite_diff_se = 0.0;
    double diff_se = 0.0;        // standard error of the paired route difference
    double step = 0.0;
};

// Directional derivative of the objective at a fixed conditioning level,
// estimated by two independent routes on common paths.  The variational route
// integrates the linearized state against the running-cost gradients; the
// finite-difference route displaces the control by +-a along the direction.
inline GateauxEstimate gateaux_derivative(const CoefficientSet& coeffs,
                                          const PerformanceSpec& perf, const DonskerField& field,
                                          double z, const ControlField& control,
                                          const ControlField& direction, const DriverPaths& paths,
                                          const TimeGrid& grid, double fd_step = 1e-3) {
    if (!(fd_step > 0.0)) throw std::invalid_argument("gateaux_derivative: step <= 0");
    const std::size_t n = paths.db.n_scenarios;
    const auto w = trapezoid_weights(0, grid.N, grid.dt);

    const StateField state = solve_forward(coeffs, control, z, paths, grid);
    const StateField chi = solve_variational(coeffs, control, direction, state, paths, grid);

    std::vector<double> var(n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= grid.N; ++k) {
            const double t = grid.t[k];
            const double x = state.x.at(s, k);
            const double uk = control.eval(k, z, s);
            const double bk = direction.u(k, z, s);
            acc += w[k] * (perf.f_x_at(t, x, uk, z) * chi.x.at(s, k) +
                           perf.f_u_at(t, x, uk, z) * bk) *
                   field.density(k, z, s);
        }
        acc += perf.g_x_at(state.x.at(s, grid.N), z) * field.density(grid.N, z, s) *
               chi.x.at(s, grid.N);
        var[s] = acc;
    }

    const ControlField up = shifted_control(control, direction, fd_step);
    const ControlField dn = shifted_control(control, direction, -fd_step);
    const StateField xp = solve_forward(coeffs, up, z, paths, grid);
    const StateField xm = solve_forward(coeffs, dn, z, paths, grid);
    const auto jp = scenario_objective(perf, field, z, up, xp, grid);
    const auto jm = scenario_objective(perf, field, z, dn, xm, grid);

    std::vector<double> fd(n, 0.0), diff(n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        fd[s] = (jp[s] - jm[s]) / (2.0 * fd_step);
        diff[s] = var[s] - fd[s];
    }

    GateauxEstimate est;
    est.variational = mean(var);
    est.variational_se = standard_error(var);
    est.finite_diff = mean(fd);
    est.finite_diff_se = standard_error(fd);
    est.diff_se = standard_error(diff);
    est.step = fd_step;
    return est;
}

struct OptimalityReport {
    double foc_stat = 0.0;  // max over times of |mean conditional u-gradient| / scale
    double foc_noise = 0.0; // max over times of the per-time standard error / scale
    double foc_rms = 0.0;   // rms of the fitted u-gradient over all nodes, same scale
    double scale = 0.0;     // rms of the u-slope of the Hamiltonian, guards division
    double tolerance = 0.0;
    bool pass = false;
    std::vector<double> foc_by_time;
};

// First-order condition at a candidate control: the fitted conditional
// u-gradient of the Hamiltonian should vanish at every node.  The statistic
// normalizes by the typical u-slope magnitude so the tolerance is unitless.
inline OptimalityReport check_necessary(const AdjointSolution& sol, double tolerance) {
    const std::size_t n = sol.dh_du.n_scenarios;
    const std::size_t cols = sol.dh_du.n_points;
    if (n == 0 || cols == 0) throw std::invalid_argument("check_necessary: empty solution");

    OptimalityReport rep;
    rep.tolerance = tolerance;
    rep.scale = rms(sol.du_scale.v);
    if (!(rep.scale > 0.0))
        throw numeric_error("check_necessary: degenerate u-slope scale");

    double rms_acc = 0.0;
    for (std::size_t k = 0; k < cols; ++k) {
        const auto col = sol.dh_du.column(k);
        const double m = mean(col);
        const double se = standard_error(col);
        rep.foc_by_time.push_back(std::abs(m) / rep.scale);
        rep.foc_stat = std::max(rep.foc_stat, rep.foc_by_time.back());
        rep.foc_noise = std::max(rep.foc_noise, se / rep.scale);
        rms_acc += sqr(rms(col));
    }
    rep.foc_rms = std::sqrt(rms_acc / static_cast<double>(cols)) / rep.scale;
    rep.pass = rep.foc_stat < tolerance;
    return rep;
}

struct ConcavityOptions {
    std::size_t probe_scenarios = 16; // scenario subsample for Hamiltonian chords
    std::size_t chords = 5;           // chord probes per function, at least 3
    double x_spread = 0.5;            // half-width of state displacements
    double tolerance = 1e-9;          // slack for chord comparisons
};

struct ConcavityReport {
    bool g_concave = true;
    bool h_concave = true;
    bool max_condition = true;
    double worst_g_gap = 0.0;   // most positive midpoint violation observed
    double worst_h_gap = 0.0;
    double worst_max_gap = 0.0; // most positive H(w) - H(u_candidate)
};

// Report-only probes of the sufficiency hypotheses: chord tests of terminal
// cost concavity and of joint (x, u) concavity of the Hamiltonian along the
// candidate trajectory, plus the pointwise maximum condition on a u-grid.
// Requires the solution to have kept at least one trace slice when the
// kernels carry history; flat-kernel problems probe with placeholder slices.
inline ConcavityReport check_sufficient(const AdjointProblem& prob, const AdjointSolution& sol,
                                        const ControlField& control, const StateField& state,
                                        const DriverPaths& paths, const TimeGrid& grid,
                                        std::span<const double> u_grid,
                                        const ConcavityOptions& opt = {}) {
    if (opt.chords < 3) throw std::invalid_argument("check_sufficient: need at least 3 chords");
    std::vector<TraceSlice> slices = sol.slices;
    if (slices.empty()) {
        if (sol.history_terms)
            throw std::invalid_argument(
                "check_sufficient: history kernels need a kept trace slice");
        TraceSlice dummy;
        dummy.k = grid.N / 2;
        slices.push_back(dummy);
    }

    ConcavityReport rep;
    const double z = prob.z;
    const std::size_t n = state.x.n_scenarios;
    const std::size_t stride = std::max<std::size_t>(1, n / opt.probe_scenarios);

    // Terminal cost chords around observed terminal states.
    for (std::size_t c = 0; c < opt.chords; ++c) {
        const std::size_t s = (c * stride) % n;
        const double x0 = state.x.at(s, grid.N);
        const double lam = 0.2 + 0.6 * static_cast<double>(c) / static_cast<double>(opt.chords - 1);
        const double xa = x0 - opt.x_spread;
        const double xb = x0 + opt.x_spread;
        const double xm = lam * xa + (1.0 - lam) * xb;
        const double gap = prob.perf.g_at(xm, z) -
                           (lam * prob.perf.g_at(xa, z) + (1.0 - lam) * prob.perf.g_at(xb, z));
        if (gap < -opt.tolerance) rep.g_concave = false;
        rep.worst_g_gap = std::max(rep.worst_g_gap, -gap);
    }

    // Hamiltonian chords in (x, u) and the maximum condition on the u-grid,
    // both at the kept slices with the fitted adjoint fields frozen.
    const double u_lo = control.lo;
    const double u_hi = control.hi;
    for (const TraceSlice& slice : slices) {
        const std::size_t k = slice.k;
        for (std::size_t c = 0; c < opt.chords; ++c) {
            const std::size_t s = (c * stride) % n;
            const double x0 = state.x.at(s, k);
            const double u0 = control.eval(k, z, s);
            double du = 0.5 * std::min(u0 - u_lo, u_hi - u0);
            if (!std::isfinite(du) || du <= 0.0) du = 0.5;
            const double lam =
                0.2 + 0.6 * static_cast<double>(c) / static_cast<double>(opt.chords - 1);
            const double xa = x0 - opt.x_spread, xb = x0 + opt.x_spread;
            const double ua = u0 - du, ub = u0 + du;
            const double hm = hamiltonian_probe(prob, sol, slice, paths, grid, s,
                                                lam * xa + (1.0 - lam) * xb,
                                                lam * ua + (1.0 - lam) * ub);
            const double ha = hamiltonian_probe(prob, sol, slice, paths, grid, s, xa, ua);
            const double hb = hamiltonian_probe(prob, sol, slice, paths, grid, s, xb, ub);
            const double gap = hm - (lam * ha + (1.0 - lam) * hb);
            if (gap < -opt.tolerance) rep.h_concave = false;
            rep.worst_h_gap = std::max(rep.worst_h_gap, -gap);
        }
        for (std::size_t s = 0; s < n; s += stride) {
            const double x0 = state.x.at(s, k);
            const double h_cand =
                hamiltonian_probe(prob, sol, slice, paths, grid, s, x0, control.eval(k, z, s));
            for (double w : u_grid) {
                const double gap =
                    hamiltonian_probe(prob, sol, slice, paths, grid, s, x0, w) - h_cand;
                if (gap > opt.tolerance) rep.max_condition = false;
                rep.worst_max_gap = std::max(rep.worst_max_gap, gap);
            }
        }
    }
    return rep;
}

// Parameterized family of controls for exhaustive search.  Each axis carries
// its own grid; the factory must accept one value per axis.
struct ControlFamily {
    std::function<ControlField(std::span<const double>)> make;
    std::vector<std::vector<double>> grids;
};

struct BruteForceResult {
    std::vector<double> best_theta;
    double best_value = -std::numeric_limits<double>::infinity();
    double best_se = 0.0;
    std::vector<std::vector<double>> theta; // every grid point visited
    std::vector<double> values;             // objective at each grid point
};

// Full factorial search over the family grids with common paths, so ranking
// noise is limited to genuine objective differences.
inline BruteForceResult brute_force_optimize(const CoefficientSet& coeffs,
                                             const PerformanceSpec& perf,
                                             const DonskerField& field,
                                             std::span<const double> z_nodes,
                                             const DriverPaths& paths, const TimeGrid& grid,
                                             const ControlFamily& family) {
    if (family.grids.empty()) throw std::invalid_argument("brute_force_optimize: no axes");
    for (const auto& axis : family.grids)
        if (axis.empty()) throw std::invalid_argument("brute_force_optimize: empty axis");

    BruteForceResult result;
    std::vector<std::size_t> idx(family.grids.size(), 0);
    std::vector<double> theta(family.grids.size());
    while (true) {
        for (std::size_t a = 0; a < idx.size(); ++a) theta[a] = family.grids[a][idx[a]];
        const ControlField u = family.make(theta);
        const PerformanceReport rep = performance(coeffs, perf, field, u, paths, grid, z_nodes);
        result.theta.push_back(theta);
        result.values.push_back(rep.total);
        if (rep.total > result.best_value) {
            result.best_value = rep.total;
            result.best_se = rep.total_se;
            result.best_theta = theta;
        }
        std::size_t a = 0;
        while (a < idx.size() && ++idx[a] == family.grids[a].size()) idx[a++] = 0;
        if (a == idx.size()) break;
    }
    return result;
}

// One-dimensional golden-section refinement of a unimodal objective, used to
// sharpen a brute-force argmax along a single axis.
inline double golden_section(const std::function<double(double)>& fn, double lo, double hi,
                             double x_tol = 1e-4) {
    if (!(hi > lo)) throw std::invalid_argument("golden_section: empty bracket");
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    double x1 = b - phi * (b - a);
    double x2 = a + phi * (b - a);
    double f1 = fn(x1), f2 = fn(x2);
    while (b - a > x_tol) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = fn(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = fn(x1);
        }
    }
    return 0.5 * (a + b);
}

} // namespace ivol
