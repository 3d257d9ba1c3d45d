#pragma once

// Optimal investment for an insider who observes the signal Z up front, in a
// market driven by the same Brownian motion:
//
//     dX(t) = X(t) pi(t) [ b0 dt + sigma0 dB(t) ],   X(0) = x0.
//
// Conditionally on Z = z the driver gains the information drift Phi = M_B/M,
// so each conditioning level is a complete market with risk premium shifted
// by Phi.  The deflator exponent accumulated here is
//
//     log rho(t) = int_0^t (theta0 - Phi) dB  -  1/2 int_0^t (theta0^2 - Phi^2) ds
//
// with theta0(s) = -b0(T, s) / sigma0(T, s).  The optimal terminal wealth is
// (U')^{-1}(c rho(T)) with c fixed by the conditional budget constraint, and
// the hedging fraction comes out of a backward per-slice regression on the
// value process (the kernel recursion below).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"
#include "ivol/donsker.hpp"
#include "ivol/grid.hpp"
#include "ivol/paths.hpp"
#include "ivol/regression.hpp"

namespace ivol {

struct Utility {
    std::function<double(double)> value;        // U
    std::function<double(double)> marginal;     // U'
    std::function<double(double)> inv_marginal; // (U')^{-1}
    // When inv_marginal(c y) = c^h inv_marginal(y) the budget equation has a
    // closed form; h is that exponent.
    double homogeneity = 0.0;
    bool homogeneous = false;

    void validate() const {
        if (!value || !marginal || !inv_marginal)
            throw std::invalid_argument("Utility: value, marginal, inv_marginal all required");
        if (homogeneous && homogeneity == 0.0)
            throw std::invalid_argument("Utility: homogeneous utility needs a nonzero exponent");
    }
};

inline Utility log_utility() {
    Utility u;
    u.value = [](double x) { return std::log(x); };
    u.marginal = [](double x) { return 1.0 / x; };
    u.inv_marginal = [](double y) { return 1.0 / y; };
    u.homogeneity = -1.0;
    u.homogeneous = true;
    return u;
}

inline Utility power_utility(double delta) {
    if (!(delta < 1.0) || delta == 0.0)
        throw std::invalid_argument("power_utility: exponent must be below 1 and nonzero");
    Utility u;
    u.value = [delta](double x) { return std::pow(x, delta) / delta; };
    u.marginal = [delta](double x) { return std::pow(x, delta - 1.0); };
    u.inv_marginal = [delta](double y) { return std::pow(y, 1.0 / (delta - 1.0)); };
    u.homogeneity = 1.0 / (delta - 1.0);
    u.homogeneous = true;
    return u;
}

struct MarketSpec {
    std::function<double(double, double, double)> b0;     // (t, s, z)
    std::function<double(double, double, double)> sigma0; // (t, s, z)
    double x0 = 1.0;
    double sigma_floor = 1e-10;

    void validate(const TimeGrid& grid, double z) const {
        if (!b0 || !sigma0) throw std::invalid_argument("MarketSpec: b0 and sigma0 required");
        if (!(x0 > 0.0)) throw std::invalid_argument("MarketSpec: x0 must be positive");
        for (std::size_t a = 0; a <= grid.N; ++a)
            for (std::size_t b = 0; b <= a; ++b) {
                const double sg = sigma0(grid.t[a], grid.t[b], z);
                if (!std::isfinite(sg) || std::abs(sg) < sigma_floor)
                    throw std::invalid_argument(
                        "MarketSpec: sigma0 must be bounded away from zero");
                if (!std::isfinite(b0(grid.t[a], grid.t[b], z)))
                    throw std::invalid_argument("MarketSpec: b0 must be finite on the grid");
            }
    }
};

struct MartingaleFields {
    std::vector<double> theta0; // deterministic risk premium row, k = 0..N
    Field m;                    // conditional density along the path
    Field phi;                  // information drift ratio
    Field log_rho;              // deflator exponent
    Field log_eps;              // log stochastic exponential of theta0 alone
    Field w;                    // density over exponential, the regression ray
};

// Accumulates the deflator and weight processes scenario by scenario.  The
// stochastic sums use trapezoidal endpoints, which anticipate one step; the
// Ito correction -1/2 beta dPhi/dz dt removes the bias that introduces.  A
// left-endpoint scheme leaves an O(dt) error in exp(log_rho) that is visible
// at practical step counts, so the corrected form is not optional.
inline MartingaleFields martingale_fields(const MarketSpec& market, const DonskerField& field,
                                          double z, const DriverPaths& paths,
                                          const TimeGrid& grid) {
    market.validate(grid, z);
    const std::size_t n = paths.n_scenarios;
    const std::size_t N = grid.N;

    MartingaleFields mf;
    mf.theta0.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
        const double s = grid.t[k];
        mf.theta0[k] = -market.b0(grid.T, s, z) / market.sigma0(grid.T, s, z);
    }

    mf.m = Field(n, N + 1);
    mf.phi = Field(n, N + 1);
    mf.log_rho = Field(n, N + 1);
    mf.log_eps = Field(n, N + 1);
    mf.w = Field(n, N + 1);

    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t k = 0; k <= N; ++k) {
            mf.m.at(s, k) = field.density(k, z, s);
            mf.phi.at(s, k) = field.phi_ratio(k, z, s);
        }
        double lr = 0.0, le = 0.0;
        mf.log_rho.at(s, 0) = 0.0;
        mf.log_eps.at(s, 0) = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            const double db = paths.db.at(s, k);
            const double a0 = mf.theta0[k] - mf.phi.at(s, k);
            const double a1 = mf.theta0[k + 1] - mf.phi.at(s, k + 1);
            lr += 0.5 * (a0 + a1) * db;
            lr -= 0.5 * field.beta_at(k) * field.phi_z_slope(k, z, s) * grid.dt;
            lr -= 0.25 * ((sqr(mf.theta0[k]) - sqr(mf.phi.at(s, k))) +
                          (sqr(mf.theta0[k + 1]) - sqr(mf.phi.at(s, k + 1)))) *
                  grid.dt;
            mf.log_rho.at(s, k + 1) = lr;

            le += 0.5 * (mf.theta0[k] + mf.theta0[k + 1]) * db;
            le -= 0.25 * (sqr(mf.theta0[k]) + sqr(mf.theta0[k + 1])) * grid.dt;
            mf.log_eps.at(s, k + 1) = le;
        }
        for (std::size_t k = 0; k <= N; ++k)
            mf.w.at(s, k) = mf.m.at(s, k) * std::exp(-mf.log_eps.at(s, k));
    }

    if (!all_finite(mf.log_rho.v) || !all_finite(mf.w.v))
        throw numeric_error("martingale_fields: non-finite deflator");
    return mf;
}

// Lagrange multiplier of the conditional budget constraint
//     E[ rho(T) (U')^{-1}(c rho(T)) M(T, z) ] / E[ M(T, z) ] = x0.
// Homogeneous utilities solve it in closed form; anything else falls back to
// bracketed bisection on the monotone budget function.
inline double solve_c(const Utility& utility, std::span<const double> log_rho_T,
                      std::span<const double> m_T, double x0, double rel_tol = 1e-6) {
    utility.validate();
    if (log_rho_T.size() != m_T.size() || log_rho_T.empty())
        throw std::invalid_argument("solve_c: mismatched sample arrays");
    if (!(x0 > 0.0)) throw std::invalid_argument("solve_c: x0 must be positive");

    double weight_sum = 0.0;
    for (double w : m_T) weight_sum += w;
    if (!(weight_sum > 0.0)) throw numeric_error("solve_c: degenerate density weights");

    const auto budget = [&](double c) {
        double acc = 0.0;
        for (std::size_t s = 0; s < log_rho_T.size(); ++s) {
            const double rho = std::exp(log_rho_T[s]);
            acc += m_T[s] * rho * utility.inv_marginal(c * rho);
        }
        return acc / weight_sum;
    };

    if (utility.homogeneous) {
        const double b1 = budget(1.0);
        if (!(b1 > 0.0) || !std::isfinite(b1))
            throw numeric_error("solve_c: degenerate unit budget");
        return std::pow(x0 / b1, 1.0 / utility.homogeneity);
    }

    double c_lo = 1.0 / x0, c_hi = 1.0 / x0;
    std::size_t guard = 0;
    while (budget(c_lo) < x0) { // budget decreases in c, so walk c down
        c_lo *= 0.5;
        if (++guard > 200) throw numeric_error("solve_c: failed to bracket the budget");
    }
    guard = 0;
    while (budget(c_hi) > x0) {
        c_hi *= 2.0;
        if (++guard > 200) throw numeric_error("solve_c: failed to bracket the budget");
    }
    while (c_hi - c_lo > rel_tol * c_hi) {
        const double mid = 0.5 * (c_lo + c_hi);
        (budget(mid) > x0 ? c_lo : c_hi) = mid;
    }
    return 0.5 * (c_lo + c_hi);
}

// Terminal wealth at the budget-feasible multiplier.
inline std::vector<double> terminal_wealth(const Utility& utility, double c,
                                           std::span<const double> log_rho_T) {
    std::vector<double> out(log_rho_T.size());
    for (std::size_t s = 0; s < out.size(); ++s)
        out[s] = utility.inv_marginal(c * std::exp(log_rho_T[s]));
    if (!all_finite(out)) throw numeric_error("terminal_wealth: non-finite optimal wealth");
    return out;
}

struct PortfolioOptions {
    RegressionSpec regression{2, 2, 1e-9}; // {1, d, d^2} plus the ray-weighted copies
    double pi_lo = -25.0;
    double pi_hi = 25.0;
    double wealth_floor_rel = 1e-8; // clamp for fitted wealth, relative to x0
    std::vector<std::size_t> keep_policy_at; // z-node indices retaining full fields
    bool force_slices = false; // run slice-resolved even when one chain would do
};

// Fitted value and hedge fields for one conditioning level.
struct PortfolioPolicy {
    double z = 0.0;
    double c = 0.0;
    Field v_diag;  // fitted wealth on the slice diagonal, (scenario, 0..N)
    Field k_diag;  // fitted hedge kernel at (t_k, t_k), (scenario, 0..N-1)
    Field pi;      // clamped wealth fraction, (scenario, 0..N-1)
    std::size_t wealth_clamped = 0;
    std::size_t pi_clamped = 0;
    bool single_chain = false;
    RegressionDiagnostics worst_diag;
};

namespace detail {

inline void merge_policy_diag(RegressionDiagnostics& worst, const RegressionDiagnostics& d) {
    if (d.n_columns - d.effective_rank > worst.n_columns - worst.effective_rank) worst = d;
    worst.rank_deficient = worst.rank_deficient || d.rank_deficient;
}

} // namespace detail

// Backward regression for the value kernel at one conditioning level.  Each
// slice t_k satisfies, on [t_k, T],
//
//     V(t_k, t_j) = fit E[V(t_k, t_j+1) | F_j]  +  theta0(t_k, t_j) K_j dt,
//     K_j = fit [ (V(t_k, t_j+1) - fitted) dB_j ] / dt,
//
// where theta0(t, s) = -b0(t, s)/sigma0(t, s).  When that ratio does not
// depend on its first argument every slice runs the same chain and one
// backward pass yields the whole diagonal; otherwise the slices share each
// node's factorization through multi-target fits.
inline PortfolioPolicy solve_bsvie(const MarketSpec& market, const Utility& utility,
                                   const DonskerField& field, double z, const DriverPaths& paths,
                                   const TimeGrid& grid, const PortfolioOptions& opt = {}) {
    const std::size_t n = paths.n_scenarios;
    const std::size_t N = grid.N;
    const MartingaleFields mf = martingale_fields(market, field, z, paths, grid);

    PortfolioPolicy pol;
    pol.z = z;
    pol.c = solve_c(utility, mf.log_rho.column(N), mf.m.column(N), market.x0);
    const std::vector<double> v_term = terminal_wealth(utility, pol.c, mf.log_rho.column(N));

    const auto theta = [&](double t, double s) {
        return -market.b0(t, s, z) / market.sigma0(t, s, z);
    };
    bool single = !opt.force_slices;
    for (std::size_t k = 0; k <= N && single; k += std::max<std::size_t>(1, N / 7))
        for (std::size_t j = 0; j <= k; j += std::max<std::size_t>(1, N / 7))
            if (std::abs(theta(grid.t[k], grid.t[j]) - theta(grid.T, grid.t[j])) > 1e-12) {
                single = false;
                break;
            }
    pol.single_chain = single;

    pol.v_diag = Field(n, N + 1);
    pol.k_diag = Field(n, N);
    for (std::size_t s = 0; s < n; ++s) pol.v_diag.at(s, N) = v_term[s];

    // chains.column(k) carries slice k's current value V(t_k, t_j+1); in
    // single-chain mode only column 0 is live and the diagonal is read off it.
    const std::size_t n_chains = single ? 1 : N + 1;
    Field chains(n, n_chains);
    for (std::size_t c = 0; c < n_chains; ++c)
        for (std::size_t s = 0; s < n; ++s) chains.at(s, c) = v_term[s];

    const bool unit_field = field.is_unit();
    // The fitted wealth of a homogeneous utility lives on the ray
    // (M / exponential)^(-h); for logarithmic utility that is the weight
    // process itself.
    const double ray_exp = utility.homogeneous ? -utility.homogeneity : 1.0;
    std::vector<double> d_col(n), w_col(n), db_scaled(n);
    for (std::size_t j = N; j-- > 0;) {
        for (std::size_t s = 0; s < n; ++s) {
            d_col[s] = unit_field ? 0.0 : z - field.signal_at(j, s);
            const double w = mf.w.at(s, j);
            w_col[s] = (ray_exp == 1.0) ? w : std::pow(w, ray_exp);
            db_scaled[s] = paths.db.at(s, j) / grid.dt;
        }
        const ConditionalRegression reg({std::span<const double>(d_col)}, opt.regression.degree,
                                        w_col, opt.regression.aug_degree,
                                        opt.regression.singular_rel_tol);
        detail::merge_policy_diag(pol.worst_diag, reg.diagnostics());

        // Slices k <= j still need values at this node when slice-resolved,
        // just the one chain otherwise.
        const std::size_t live = single ? 1 : j + 1;
        std::vector<std::vector<double>> target_cols;
        target_cols.reserve(live);
        for (std::size_t c = 0; c < live; ++c) target_cols.push_back(chains.column(c));
        std::vector<std::span<const double>> targets;
        targets.reserve(live);
        for (const auto& tc : target_cols) targets.push_back(tc);
        const auto projected = reg.fit_many(targets);

        std::vector<std::vector<double>> centred(projected.size(), std::vector<double>(n));
        for (std::size_t c = 0; c < projected.size(); ++c)
            for (std::size_t s = 0; s < n; ++s)
                centred[c][s] = (chains.at(s, c) - projected[c][s]) * db_scaled[s];
        std::vector<std::span<const double>> centred_spans;
        centred_spans.reserve(centred.size());
        for (const auto& cc : centred) centred_spans.push_back(cc);
        const auto hedges = reg.fit_many(centred_spans);

        for (std::size_t c = 0; c < projected.size(); ++c) {
            const double drift = single ? theta(grid.T, grid.t[j]) : theta(grid.t[c], grid.t[j]);
            for (std::size_t s = 0; s < n; ++s)
                chains.at(s, c) = projected[c][s] + drift * hedges[c][s] * grid.dt;
        }
        if (single) {
            for (std::size_t s = 0; s < n; ++s) {
                pol.v_diag.at(s, j) = chains.at(s, 0);
                pol.k_diag.at(s, j) = hedges[0][s];
            }
        } else {
            for (std::size_t s = 0; s < n; ++s) {
                pol.v_diag.at(s, j) = chains.at(s, j);
                pol.k_diag.at(s, j) = hedges[j][s];
            }
        }
    }

    // Wealth fraction off the diagonal, with the fitted wealth floored away
    // from zero and the fraction clamped to the requested admissible band.
    pol.pi = Field(n, N);
    const double floor = opt.wealth_floor_rel * market.x0;
    for (std::size_t k = 0; k < N; ++k) {
        const double spot_sigma = market.sigma0(grid.t[k], grid.t[k], z);
        for (std::size_t s = 0; s < n; ++s) {
            double v = pol.v_diag.at(s, k);
            if (v < floor) {
                v = floor;
                ++pol.wealth_clamped;
            }
            double frac = pol.k_diag.at(s, k) / (spot_sigma * v);
            if (frac < opt.pi_lo || frac > opt.pi_hi) {
                frac = std::clamp(frac, opt.pi_lo, opt.pi_hi);
                ++pol.pi_clamped;
            }
            pol.pi.at(s, k) = frac;
        }
    }
    return pol;
}

struct PortfolioSolution {
    std::vector<double> z_nodes;
    std::vector<double> c;             // multiplier per conditioning level
    Field pi_used;                     // (scenario, 0..N-1) policy at the realized signal
    std::vector<PortfolioPolicy> kept; // full fields for the requested node indices
    std::size_t wealth_clamped = 0;
    std::size_t pi_clamped = 0;
    std::size_t off_grid = 0; // scenarios whose realized signal left the z grid
    RegressionDiagnostics worst_diag;
};

// Solves the per-level problem across the z grid and assembles the policy the
// insider actually uses: linear interpolation of pi(., z) at the realized
// signal, clamped to the edge nodes outside the grid.
inline PortfolioSolution optimal_portfolio(const MarketSpec& market, const Utility& utility,
                                           const DonskerField& field,
                                           std::span<const double> z_nodes,
                                           const DriverPaths& paths, const TimeGrid& grid,
                                           const PortfolioOptions& opt = {}) {
    if (z_nodes.empty()) throw std::invalid_argument("optimal_portfolio: empty z grid");
    for (std::size_t i = 0; i + 1 < z_nodes.size(); ++i)
        if (z_nodes[i + 1] <= z_nodes[i])
            throw std::invalid_argument("optimal_portfolio: z grid must be increasing");

    const std::size_t n = paths.n_scenarios;
    PortfolioSolution sol;
    sol.z_nodes.assign(z_nodes.begin(), z_nodes.end());
    sol.pi_used = Field(n, grid.N);

    // Interpolation brackets at the realized signal, fixed across levels.
    std::vector<std::size_t> bracket(n, 0);
    std::vector<double> weight_lo(n, 1.0);
    for (std::size_t s = 0; s < n; ++s) {
        const double zr = field.signal_terminal(s);
        if (zr <= z_nodes.front()) {
            bracket[s] = 0;
            weight_lo[s] = 1.0;
            if (zr < z_nodes.front()) ++sol.off_grid;
        } else if (zr >= z_nodes.back()) {
            bracket[s] = z_nodes.size() > 1 ? z_nodes.size() - 2 : 0;
            weight_lo[s] = z_nodes.size() > 1 ? 0.0 : 1.0;
            if (zr > z_nodes.back()) ++sol.off_grid;
        } else {
            std::size_t i = 0;
            while (z_nodes[i + 1] < zr) ++i;
            bracket[s] = i;
            weight_lo[s] = (z_nodes[i + 1] - zr) / (z_nodes[i + 1] - z_nodes[i]);
        }
    }

    for (std::size_t i = 0; i < z_nodes.size(); ++i) {
        PortfolioPolicy pol = solve_bsvie(market, utility, field, z_nodes[i], paths, grid, opt);
        sol.c.push_back(pol.c);
        sol.wealth_clamped += pol.wealth_clamped;
        sol.pi_clamped += pol.pi_clamped;
        detail::merge_policy_diag(sol.worst_diag, pol.worst_diag);

        for (std::size_t s = 0; s < n; ++s) {
            double w = 0.0;
            if (bracket[s] == i) w = weight_lo[s];
            else if (bracket[s] + 1 == i && z_nodes.size() > 1) w = 1.0 - weight_lo[s];
            if (w == 0.0) continue;
            for (std::size_t k = 0; k < grid.N; ++k)
                sol.pi_used.at(s, k) += w * pol.pi.at(s, k);
        }
        for (std::size_t keep : opt.keep_policy_at)
            if (keep == i) sol.kept.push_back(pol);
    }
    return sol;
}

struct WealthPath {
    Field log_x; // (scenario, 0..N)
    std::vector<double> log_terminal;
    bool positive = true; // exponential scheme: positive exactly when finite
};

// Wealth under a fraction policy, accumulated in logs so positivity is
// structural:  log X(k+1) = log X(k) + (pi b0 - pi^2 sigma0^2 / 2) dt
//                           + pi sigma0 dB  (spot coefficients, left sums).
inline WealthPath wealth_path(const MarketSpec& market, const Field& pi,
                              std::span<const double> z_for, const DriverPaths& paths,
                              const TimeGrid& grid) {
    const std::size_t n = paths.n_scenarios;
    if (pi.n_scenarios != n || pi.n_points < grid.N)
        throw std::invalid_argument("wealth_path: policy shape mismatch");
    if (!z_for.empty() && z_for.size() != n)
        throw std::invalid_argument("wealth_path: z array must match scenarios");

    WealthPath wp;
    wp.log_x = Field(n, grid.N + 1);
    wp.log_terminal.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        const double z = z_for.empty() ? 0.0 : z_for[s];
        double lx = std::log(market.x0);
        wp.log_x.at(s, 0) = lx;
        for (std::size_t k = 0; k < grid.N; ++k) {
            const double t = grid.t[k];
            const double b = market.b0(t, t, z);
            const double sg = market.sigma0(t, t, z);
            const double p = pi.at(s, k);
            lx += (p * b - 0.5 * sqr(p * sg)) * grid.dt + p * sg * paths.db.at(s, k);
            wp.log_x.at(s, k + 1) = lx;
        }
        wp.log_terminal[s] = lx;
    }
    wp.positive = all_finite(wp.log_x.v);
    return wp;
}

struct ValueStat {
    double value = 0.0;
    double se = 0.0;
};

// Realized log-wealth growth over the initial endowment.
inline ValueStat log_value_stat(const WealthPath& wp, double x0) {
    std::vector<double> growth(wp.log_terminal.size());
    for (std::size_t s = 0; s < growth.size(); ++s)
        growth[s] = wp.log_terminal[s] - std::log(x0);
    return {mean(growth), standard_error(growth)};
}

} // namespace ivol
