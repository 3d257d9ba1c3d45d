#ifndef IVOL_SVIE_HPP
#define IVOL_SVIE_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ivol/core.hpp"
#include "ivol/grid.hpp"
#include "ivol/paths.hpp"

namespace ivol {

// State equation coefficients.  Kernels take (t, s, x, u, z) with t the
// evaluation time of the state and s the integration time; gamma additionally
// takes the jump mark.  Analytic partials are optional; central differences
// with step fd_step * (1 + |arg|) fill the gaps.
using Kernel = std::function<double(double, double, double, double, double)>;
using JumpKernel = std::function<double(double, double, double, double, double, double)>;

enum class KernelTime { automatic, dependent, independent };

struct CoefficientSet {
    std::function<double(double, double)> xi; // forcing term (t, z)
    Kernel b;
    Kernel sigma;
    JumpKernel gamma; // may be empty when the model has no jump part

    Kernel b_t, b_x, b_u;          // partial in the first kernel argument / state / control
    Kernel sigma_t, sigma_x, sigma_u;
    JumpKernel gamma_t, gamma_x, gamma_u;

    double fd_step = 1e-5;
    KernelTime time_dep = KernelTime::automatic;

    double xi_at(double t, double z) const { return xi ? xi(t, z) : 0.0; }
};

namespace coeff {

inline double partial_x(const Kernel& analytic, const Kernel& f, double t, double s, double x,
                        double u, double z, double step) {
    if (analytic) return analytic(t, s, x, u, z);
    return central_diff([&](double xx) { return f(t, s, xx, u, z); }, x, step);
}

inline double partial_u(const Kernel& analytic, const Kernel& f, double t, double s, double x,
                        double u, double z, double step) {
    if (analytic) return analytic(t, s, x, u, z);
    return central_diff([&](double uu) { return f(t, s, x, uu, z); }, u, step);
}

inline double partial_t(const Kernel& analytic, const Kernel& f, double t, double s, double x,
                        double u, double z, double step) {
    if (analytic) return analytic(t, s, x, u, z);
    return central_diff([&](double tt) { return f(tt, s, x, u, z); }, t, step);
}

inline double jump_partial_x(const JumpKernel& analytic, const JumpKernel& f, double t, double s,
                             double x, double u, double z, double zeta, double step) {
    if (analytic) return analytic(t, s, x, u, z, zeta);
    return central_diff([&](double xx) { return f(t, s, xx, u, z, zeta); }, x, step);
}

inline double jump_partial_u(const JumpKernel& analytic, const JumpKernel& f, double t, double s,
                             double x, double u, double z, double zeta, double step) {
    if (analytic) return analytic(t, s, x, u, z, zeta);
    return central_diff([&](double uu) { return f(t, s, x, uu, z, zeta); }, u, step);
}

inline double jump_partial_t(const JumpKernel& analytic, const JumpKernel& f, double t, double s,
                             double x, double u, double z, double zeta, double step) {
    if (analytic) return analytic(t, s, x, u, z, zeta);
    return central_diff([&](double tt) { return f(tt, s, x, u, z, zeta); }, t, step);
}

} // namespace coeff

// Probe whether the kernels depend on their first (evaluation-time) argument.
// When they do not, the Volterra sums telescope and the forward solve runs as
// a plain Euler recursion.
inline bool kernels_time_independent(const CoefficientSet& c, const TimeGrid& grid, double z) {
    if (c.time_dep == KernelTime::independent) return true;
    if (c.time_dep == KernelTime::dependent) return false;
    const double ts[] = {0.0, 0.5 * grid.T, grid.T};
    const double ss[] = {0.0, grid.T / 3.0};
    const double xs[] = {0.0, 0.9};
    const double us[] = {0.0, 0.7};
    for (double s : ss)
        for (double x : xs)
            for (double u : us) {
                const double b0 = c.b ? c.b(ts[0], s, x, u, z) : 0.0;
                const double s0 = c.sigma ? c.sigma(ts[0], s, x, u, z) : 0.0;
                for (std::size_t i = 1; i < 3; ++i) {
                    if (c.b && std::abs(c.b(ts[i], s, x, u, z) - b0) > 1e-12 * (1.0 + std::abs(b0)))
                        return false;
                    if (c.sigma &&
                        std::abs(c.sigma(ts[i], s, x, u, z) - s0) > 1e-12 * (1.0 + std::abs(s0)))
                        return false;
                    if (c.gamma) {
                        const double g0 = c.gamma(ts[0], s, x, u, z, 1.0);
                        if (std::abs(c.gamma(ts[i], s, x, u, z, 1.0) - g0) >
                            1e-12 * (1.0 + std::abs(g0)))
                            return false;
                    }
                }
            }
    return true;
}

// Control evaluated per (step, z, scenario).  Adaptedness is the caller's
// contract: the callable may only look at information up to step k.
struct ControlField {
    std::function<double(std::size_t, double, std::size_t)> u;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    double eval(std::size_t k, double z, std::size_t scenario) const {
        const double val = u(k, z, scenario);
        if (!(val >= lo - 1e-12 && val <= hi + 1e-12))
            throw std::invalid_argument("ControlField: value escapes the admissible interval");
        return val;
    }

    static ControlField constant(double value) {
        ControlField f;
        f.u = [value](std::size_t, double, std::size_t) { return value; };
        return f;
    }
};

struct StateField {
    double z = 0.0;
    Field x; // (scenario, grid point)
};

namespace detail {

[[noreturn]] inline void blow_up(const char* who, std::size_t step) {
    throw numeric_error(std::string(who) + ": non-finite state at step " + std::to_string(step));
}

} // namespace detail

// Euler scheme for
//   X(t) = xi(t,z) + int_0^t b(t,s,X,u,z) ds + int_0^t sigma(t,s,X,u,z) dB(s)
//        + int_0^t int gamma(t,s,X,u,z,zeta) N~(ds,dzeta)
// with left-point state/control in every sum and the full kernel history
// rebuilt at each evaluation time.
inline StateField solve_forward(const CoefficientSet& c, const ControlField& control, double z,
                                const DriverPaths& paths, const TimeGrid& grid) {
    if (!c.b && !c.sigma && !c.gamma && !c.xi)
        throw std::invalid_argument("solve_forward: empty coefficient set");
    const std::size_t N = grid.N;
    const bool fast = kernels_time_independent(c, grid, z);
    const bool jumps_on = c.gamma && paths.levy.has_jumps();

    StateField out;
    out.z = z;
    out.x = Field(paths.n_scenarios, N + 1);

    std::vector<double> xi_k(N + 1);
    for (std::size_t k = 0; k <= N; ++k) xi_k[k] = c.xi_at(grid.t[k], z);

    std::vector<double> xs(N + 1), us(N);
    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        const auto& jumps = paths.jumps[s];
        xs[0] = xi_k[0];
        out.x.at(s, 0) = xs[0];
        std::size_t cursor_fast = 0;
        for (std::size_t k = 0; k < N; ++k) {
            us[k] = control.eval(k, z, s);
            const double tk = grid.t[k];
            double next;
            if (fast) {
                double inc = xi_k[k + 1] - xi_k[k];
                if (c.b) inc += c.b(tk, tk, xs[k], us[k], z) * grid.dt;
                if (c.sigma) inc += c.sigma(tk, tk, xs[k], us[k], z) * paths.db.at(s, k);
                if (jumps_on) {
                    while (cursor_fast < jumps.size() && jumps[cursor_fast].step == k) {
                        const auto& jp = jumps[cursor_fast];
                        inc += c.gamma(tk, jp.time, xs[k], us[k], z, jp.mark);
                        ++cursor_fast;
                    }
                    inc -= grid.dt * paths.levy.nu_integral([&](double zeta) {
                        return c.gamma(tk, tk, xs[k], us[k], z, zeta);
                    });
                }
                next = xs[k] + inc;
            } else {
                const double te = grid.t[k + 1];
                double acc = xi_k[k + 1];
                for (std::size_t j = 0; j <= k; ++j) {
                    const double tj = grid.t[j];
                    if (c.b) acc += c.b(te, tj, xs[j], us[j], z) * grid.dt;
                    if (c.sigma) acc += c.sigma(te, tj, xs[j], us[j], z) * paths.db.at(s, j);
                    if (jumps_on)
                        acc -= grid.dt * paths.levy.nu_integral([&](double zeta) {
                            return c.gamma(te, tj, xs[j], us[j], z, zeta);
                        });
                }
                if (jumps_on)
                    for (const auto& jp : jumps) {
                        if (jp.step > k) break;
                        acc += c.gamma(te, jp.time, xs[jp.step], us[jp.step], z, jp.mark);
                    }
                next = acc;
            }
            if (!std::isfinite(next)) detail::blow_up("solve_forward", k + 1);
            xs[k + 1] = next;
            out.x.at(s, k + 1) = next;
        }
    }
    return out;
}

// First variation of the state in a control direction: the linear SVIE with
// coefficients d(b)/dx, d(b)/du etc. frozen along the given trajectory.
inline StateField solve_variational(const CoefficientSet& c, const ControlField& control,
                                    const ControlField& direction, const StateField& state,
                                    const DriverPaths& paths, const TimeGrid& grid) {
    const std::size_t N = grid.N;
    const double z = state.z;
    const bool fast = kernels_time_independent(c, grid, z);
    const bool jumps_on = c.gamma && paths.levy.has_jumps();

    StateField out;
    out.z = z;
    out.x = Field(paths.n_scenarios, N + 1);

    std::vector<double> chi(N + 1), us(N), beta(N);
    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        const auto& jumps = paths.jumps[s];
        chi[0] = 0.0;
        std::size_t cursor_fast = 0;
        for (std::size_t k = 0; k < N; ++k) {
            us[k] = control.eval(k, z, s);
            beta[k] = direction.u(k, z, s);
            const double tk = grid.t[k];
            const double xk = state.x.at(s, k);
            double next;
            auto drift_term = [&](double t, double tj, double xj, double uj, double chij,
                                  double betaj) {
                return coeff::partial_x(c.b_x, c.b, t, tj, xj, uj, z, c.fd_step) * chij +
                       coeff::partial_u(c.b_u, c.b, t, tj, xj, uj, z, c.fd_step) * betaj;
            };
            auto diff_term = [&](double t, double tj, double xj, double uj, double chij,
                                 double betaj) {
                return coeff::partial_x(c.sigma_x, c.sigma, t, tj, xj, uj, z, c.fd_step) * chij +
                       coeff::partial_u(c.sigma_u, c.sigma, t, tj, xj, uj, z, c.fd_step) * betaj;
            };
            auto jump_term = [&](double t, double tj, double xj, double uj, double chij,
                                 double betaj, double zeta) {
                return coeff::jump_partial_x(c.gamma_x, c.gamma, t, tj, xj, uj, z, zeta, c.fd_step) *
                           chij +
                       coeff::jump_partial_u(c.gamma_u, c.gamma, t, tj, xj, uj, z, zeta, c.fd_step) *
                           betaj;
            };
            if (fast) {
                double inc = 0.0;
                if (c.b) inc += drift_term(tk, tk, xk, us[k], chi[k], beta[k]) * grid.dt;
                if (c.sigma) inc += diff_term(tk, tk, xk, us[k], chi[k], beta[k]) * paths.db.at(s, k);
                if (jumps_on) {
                    while (cursor_fast < jumps.size() && jumps[cursor_fast].step == k) {
                        const auto& jp = jumps[cursor_fast];
                        inc += jump_term(tk, jp.time, xk, us[k], chi[k], beta[k], jp.mark);
                        ++cursor_fast;
                    }
                    inc -= grid.dt * paths.levy.nu_integral([&](double zeta) {
                        return jump_term(tk, tk, xk, us[k], chi[k], beta[k], zeta);
                    });
                }
                next = chi[k] + inc;
            } else {
                const double te = grid.t[k + 1];
                double acc = 0.0;
                for (std::size_t j = 0; j <= k; ++j) {
                    const double tj = grid.t[j];
                    const double xj = state.x.at(s, j);
                    if (c.b) acc += drift_term(te, tj, xj, us[j], chi[j], beta[j]) * grid.dt;
                    if (c.sigma) acc += diff_term(te, tj, xj, us[j], chi[j], beta[j]) * paths.db.at(s, j);
                    if (jumps_on)
                        acc -= grid.dt * paths.levy.nu_integral([&](double zeta) {
                            return jump_term(te, tj, xj, us[j], chi[j], beta[j], zeta);
                        });
                }
                if (jumps_on)
                    for (const auto& jp : jumps) {
                        if (jp.step > k) break;
                        acc += jump_term(te, jp.time, state.x.at(s, jp.step), us[jp.step],
                                         chi[jp.step], beta[jp.step], jp.mark);
                    }
                next = acc;
            }
            if (!std::isfinite(next)) detail::blow_up("solve_variational", k + 1);
            chi[k + 1] = next;
            out.x.at(s, k + 1) = next;
        }
        out.x.at(s, 0) = 0.0;
    }
    return out;
}

} // namespace ivol

#endif
