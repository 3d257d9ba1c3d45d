#ifndef IVOL_ADJOINT_HPP
#define IVOL_ADJOINT_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ivol/core.hpp"
#include "ivol/donsker.hpp"
#include "ivol/grid.hpp"
#include "ivol/paths.hpp"
#include "ivol/regression.hpp"
#include "ivol/svie.hpp"

namespace ivol {

// Running and terminal reward.  The conditional density multiplies both, so
// the solvers only ever see f and g together with the density field.
struct PerformanceSpec {
    std::function<double(double, double, double, double)> f; // (t, x, u, z)
    std::function<double(double, double)> g;                 // (x, z)
    std::function<double(double, double, double, double)> f_x, f_u;
    std::function<double(double, double)> g_x;
    double fd_step = 1e-5;

    double f_at(double t, double x, double u, double z) const { return f ? f(t, x, u, z) : 0.0; }
    double g_at(double x, double z) const { return g ? g(x, z) : 0.0; }

    double f_x_at(double t, double x, double u, double z) const {
        if (!f) return 0.0;
        if (f_x) return f_x(t, x, u, z);
        return central_diff([&](double xx) { return f(t, xx, u, z); }, x, fd_step);
    }
    double f_u_at(double t, double x, double u, double z) const {
        if (!f) return 0.0;
        if (f_u) return f_u(t, x, u, z);
        return central_diff([&](double uu) { return f(t, x, uu, z); }, u, fd_step);
    }
    double g_x_at(double x, double z) const {
        if (!g) return 0.0;
        if (g_x) return g_x(x, z);
        return central_diff([&](double xx) { return g(xx, z); }, x, fd_step);
    }
};

struct AdjointProblem {
    CoefficientSet coeffs;
    PerformanceSpec perf;
    const DonskerField* field = nullptr;
    double z = 0.0;
};

// Conditioning data for one time slice: plain statistics spanned by a
// polynomial basis, plus an optional positive prefactor column for targets
// proportional to a density or an exponential martingale.
struct ConditioningSet {
    std::vector<std::vector<double>> stats;
    std::vector<double> aug;
};

using StatsBuilder = std::function<ConditioningSet(std::size_t)>;

// Default conditioning: the state itself, the signal when the field carries
// one, and the density value as prefactor column.
inline StatsBuilder make_state_conditioning(const StateField& state, const DonskerField& field,
                                            double z) {
    return [&state, &field, z](std::size_t k) {
        ConditioningSet cs;
        const std::size_t n = state.x.n_scenarios;
        std::vector<double> xcol(n);
        for (std::size_t s = 0; s < n; ++s) xcol[s] = state.x.at(s, k);
        cs.stats.push_back(std::move(xcol));
        if (!field.is_unit()) {
            std::vector<double> zcol(n), mcol(n);
            for (std::size_t s = 0; s < n; ++s) {
                zcol[s] = field.signal_at(k, s);
                mcol[s] = field.density(k, z, s);
            }
            cs.stats.push_back(std::move(zcol));
            cs.aug = std::move(mcol);
        }
        return cs;
    };
}

// Conditional-expectation and Malliavin-trace estimates kept at one probe
// time for later Hamiltonian evaluation away from the trajectory.
struct TraceSlice {
    std::size_t k = 0;
    std::vector<std::vector<double>> p_proj;  // [j - k - 1][scenario], E[p(t_j) | F_k]
    std::vector<std::vector<double>> trace_b; // same layout, E[D_k p(t_j) | F_k]
    std::vector<std::vector<std::vector<double>>> trace_n; // [mark][j - k - 1][scenario]
};

struct AdjointOptions {
    RegressionSpec regression;
    std::vector<std::size_t> keep_trace_at;
    bool force_history = false; // exercise the history terms even for flat kernels
};

struct AdjointSolution {
    Field p;                // (scenario, 0..N)
    Field q;                // (scenario, 0..N-1)
    std::vector<Field> r;   // per mark, (scenario, 0..N-1)
    Field h_value;          // Hamiltonian along the trajectory
    Field h1;               // its history part
    Field dh_dx, dh_du;     // partials along the trajectory
    Field du_scale;         // sum of |term| magnitudes entering dh_du
    std::vector<TraceSlice> slices;
    RegressionDiagnostics worst_diag;
    bool history_terms = false;
};

namespace detail {

// d/dt of the kernel's first argument, then in x or u.  Built from whatever
// analytic partials exist; falls back to nested central differences.
struct KernelDerivs {
    const CoefficientSet& c;

    double b_t(double t, double s, double x, double u, double z) const {
        return coeff::partial_t(c.b_t, c.b, t, s, x, u, z, c.fd_step);
    }
    double sigma_t(double t, double s, double x, double u, double z) const {
        return coeff::partial_t(c.sigma_t, c.sigma, t, s, x, u, z, c.fd_step);
    }
    double gamma_t(double t, double s, double x, double u, double z, double zeta) const {
        return coeff::jump_partial_t(c.gamma_t, c.gamma, t, s, x, u, z, zeta, c.fd_step);
    }
    double b_t_x(double t, double s, double x, double u, double z) const {
        return central_diff([&](double xx) { return b_t(t, s, xx, u, z); }, x, c.fd_step);
    }
    double b_t_u(double t, double s, double x, double u, double z) const {
        return central_diff([&](double uu) { return b_t(t, s, x, uu, z); }, u, c.fd_step);
    }
    double sigma_t_x(double t, double s, double x, double u, double z) const {
        return central_diff([&](double xx) { return sigma_t(t, s, xx, u, z); }, x, c.fd_step);
    }
    double sigma_t_u(double t, double s, double x, double u, double z) const {
        return central_diff([&](double uu) { return sigma_t(t, s, x, uu, z); }, u, c.fd_step);
    }
    double gamma_t_x(double t, double s, double x, double u, double z, double zeta) const {
        return central_diff([&](double xx) { return gamma_t(t, s, xx, u, z, zeta); }, x, c.fd_step);
    }
    double gamma_t_u(double t, double s, double x, double u, double z, double zeta) const {
        return central_diff([&](double uu) { return gamma_t(t, s, x, uu, z, zeta); }, u, c.fd_step);
    }
};

inline Field compensated_mark_increments(const DriverPaths& paths, const TimeGrid& grid,
                                         std::size_t mark_index) {
    Field dn(paths.n_scenarios, grid.N);
    const double comp = paths.levy.intensity * paths.levy.marks[mark_index].prob * grid.dt;
    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        for (std::size_t k = 0; k < grid.N; ++k) dn.at(s, k) = -comp;
        for (const auto& jp : paths.jumps[s])
            if (jp.mark_index == mark_index) dn.at(s, jp.step) += 1.0;
    }
    return dn;
}

inline ConditionalRegression build_regression(const ConditioningSet& cs,
                                              const RegressionSpec& spec) {
    std::vector<std::span<const double>> stats;
    stats.reserve(cs.stats.size());
    for (const auto& col : cs.stats) stats.emplace_back(col);
    return ConditionalRegression(stats, spec.degree, std::span<const double>(cs.aug),
                                 cs.aug.empty() ? 0 : spec.aug_degree, spec.singular_rel_tol);
}

inline void merge_diag(RegressionDiagnostics& worst, const RegressionDiagnostics& d) {
    worst.n_columns = std::max(worst.n_columns, d.n_columns);
    if (d.rank_deficient) worst.rank_deficient = true;
    worst.effective_rank = std::max(worst.effective_rank, d.effective_rank);
}

} // namespace detail

// Backward scheme for the adjoint equation
//   dp = -dH/dx dt + q dB + int r dN~,   p(T) = g_x(X(T), z) M(T, z),
// with H = f M + b(t,t) p + sigma(t,t) q + int gamma(t,t) r nu + history terms
// from the s-derivatives of the kernels.  All conditional expectations are
// least-squares projections on the conditioning statistics; q, r and the
// traces are increment-covariance projections of the centred successor.
inline AdjointSolution solve_adjoint_bsde(const AdjointProblem& prob, const ControlField& control,
                                          const StateField& state, const DriverPaths& paths,
                                          const TimeGrid& grid, const StatsBuilder& builder,
                                          const AdjointOptions& opts = {}) {
    if (prob.field == nullptr) throw std::invalid_argument("solve_adjoint_bsde: field required");
    const DonskerField& field = *prob.field;
    const CoefficientSet& c = prob.coeffs;
    const PerformanceSpec& perf = prob.perf;
    const double z = prob.z;
    const std::size_t N = grid.N;
    const std::size_t n = paths.n_scenarios;
    const std::size_t n_marks = paths.levy.has_jumps() && c.gamma ? paths.levy.marks.size() : 0;
    const bool history = opts.force_history || !kernels_time_independent(c, grid, z);
    const detail::KernelDerivs kd{c};

    AdjointSolution sol;
    sol.history_terms = history;
    sol.p = Field(n, N + 1);
    sol.q = Field(n, N);
    sol.r.assign(n_marks, Field(n, N));
    sol.h_value = Field(n, N);
    sol.h1 = Field(n, N);
    sol.dh_dx = Field(n, N);
    sol.dh_du = Field(n, N);
    sol.du_scale = Field(n, N);

    std::vector<Field> dn;
    for (std::size_t i = 0; i < n_marks; ++i)
        dn.push_back(detail::compensated_mark_increments(paths, grid, i));

    // Control and density columns used repeatedly below.
    Field uvals(n, N), mdens(n, N + 1);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < N; ++k) uvals.at(s, k) = control.eval(k, z, s);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k <= N; ++k) mdens.at(s, k) = field.density(k, z, s);

    for (std::size_t s = 0; s < n; ++s)
        sol.p.at(s, N) = perf.g_x_at(state.x.at(s, N), z) * mdens.at(s, N);

    for (std::size_t k = N; k-- > 0;) {
        const ConditioningSet cs = builder(k);
        const ConditionalRegression reg = detail::build_regression(cs, opts.regression);
        const double tk = grid.t[k];

        // Successor projections: p(t_j) for every later node when the history
        // terms are alive, only j = k + 1 otherwise.
        const std::size_t j_last = history ? N : k + 1;
        std::vector<std::span<const double>> targets;
        std::vector<std::vector<double>> pj(j_last - k);
        for (std::size_t j = k + 1; j <= j_last; ++j) {
            pj[j - k - 1].resize(n);
            for (std::size_t s = 0; s < n; ++s) pj[j - k - 1][s] = sol.p.at(s, j);
            targets.emplace_back(pj[j - k - 1]);
        }
        const auto p_proj = reg.fit_many(targets);

        std::vector<std::vector<double>> ctargets((1 + n_marks) * (j_last - k));
        for (std::size_t j = k + 1; j <= j_last; ++j) {
            const std::size_t m = j - k - 1;
            ctargets[m].resize(n);
            for (std::size_t s = 0; s < n; ++s)
                ctargets[m][s] = (pj[m][s] - p_proj[m][s]) * paths.db.at(s, k) / grid.dt;
            for (std::size_t i = 0; i < n_marks; ++i) {
                auto& tg = ctargets[(i + 1) * (j_last - k) + m];
                tg.resize(n);
                const double scale =
                    paths.levy.intensity * paths.levy.marks[i].prob * grid.dt;
                for (std::size_t s = 0; s < n; ++s)
                    tg[s] = (pj[m][s] - p_proj[m][s]) * dn[i].at(s, k) / scale;
            }
        }
        std::vector<std::span<const double>> cspans;
        cspans.reserve(ctargets.size());
        for (const auto& t : ctargets) cspans.emplace_back(t);
        const auto fits = reg.fit_many(cspans);
        detail::merge_diag(sol.worst_diag, reg.diagnostics());

        const auto& p_bar = p_proj[0];
        const auto& q_hat = fits[0];
        auto r_hat = [&](std::size_t i) -> const std::vector<double>& {
            return fits[(i + 1) * (j_last - k)];
        };
        auto trace_b = [&](std::size_t j) -> const std::vector<double>& { return fits[j - k - 1]; };
        auto trace_n = [&](std::size_t i, std::size_t j) -> const std::vector<double>& {
            return fits[(i + 1) * (j_last - k) + (j - k - 1)];
        };

        if (std::find(opts.keep_trace_at.begin(), opts.keep_trace_at.end(), k) !=
            opts.keep_trace_at.end()) {
            if (!history)
                throw std::invalid_argument(
                    "solve_adjoint_bsde: trace slices need the history terms enabled");
            TraceSlice slice;
            slice.k = k;
            slice.p_proj = p_proj;
            slice.trace_b.assign(fits.begin(), fits.begin() + long(j_last - k));
            slice.trace_n.resize(n_marks);
            for (std::size_t i = 0; i < n_marks; ++i)
                slice.trace_n[i].assign(fits.begin() + long((i + 1) * (j_last - k)),
                                        fits.begin() + long((i + 2) * (j_last - k)));
            sol.slices.push_back(std::move(slice));
        }

        const auto w = trapezoid_weights(k, N, grid.dt);
        for (std::size_t s = 0; s < n; ++s) {
            const double xk = state.x.at(s, k);
            const double uk = uvals.at(s, k);
            const double m = mdens.at(s, k);

            double h1 = 0.0, h1x = 0.0, h1u = 0.0;
            if (history) {
                for (std::size_t j = k; j <= N; ++j) {
                    const double sj = grid.t[j];
                    const double pv = (j == k) ? p_bar[s] : p_proj[j - k - 1][s];
                    const double tb = (j == k) ? q_hat[s] : trace_b(j)[s];
                    if (c.b) {
                        h1 += w[j - k] * kd.b_t(sj, tk, xk, uk, z) * pv;
                        h1x += w[j - k] * kd.b_t_x(sj, tk, xk, uk, z) * pv;
                        h1u += w[j - k] * kd.b_t_u(sj, tk, xk, uk, z) * pv;
                    }
                    if (c.sigma) {
                        h1 += w[j - k] * kd.sigma_t(sj, tk, xk, uk, z) * tb;
                        h1x += w[j - k] * kd.sigma_t_x(sj, tk, xk, uk, z) * tb;
                        h1u += w[j - k] * kd.sigma_t_u(sj, tk, xk, uk, z) * tb;
                    }
                    for (std::size_t i = 0; i < n_marks; ++i) {
                        const double tn = (j == k) ? r_hat(i)[s] : trace_n(i, j)[s];
                        const double nu = paths.levy.intensity * paths.levy.marks[i].prob;
                        const double zeta = paths.levy.marks[i].zeta;
                        h1 += w[j - k] * nu * kd.gamma_t(sj, tk, xk, uk, z, zeta) * tn;
                        h1x += w[j - k] * nu * kd.gamma_t_x(sj, tk, xk, uk, z, zeta) * tn;
                        h1u += w[j - k] * nu * kd.gamma_t_u(sj, tk, xk, uk, z, zeta) * tn;
                    }
                }
            }

            double h0 = perf.f_at(tk, xk, uk, z) * m;
            double hx = perf.f_x_at(tk, xk, uk, z) * m;
            double hu = perf.f_u_at(tk, xk, uk, z) * m;
            double scale = std::abs(hu);
            if (c.b) {
                h0 += c.b(tk, tk, xk, uk, z) * p_bar[s];
                hx += coeff::partial_x(c.b_x, c.b, tk, tk, xk, uk, z, c.fd_step) * p_bar[s];
                const double bu = coeff::partial_u(c.b_u, c.b, tk, tk, xk, uk, z, c.fd_step);
                hu += bu * p_bar[s];
                scale += std::abs(bu * p_bar[s]);
            }
            if (c.sigma) {
                h0 += c.sigma(tk, tk, xk, uk, z) * q_hat[s];
                hx += coeff::partial_x(c.sigma_x, c.sigma, tk, tk, xk, uk, z, c.fd_step) * q_hat[s];
                const double su = coeff::partial_u(c.sigma_u, c.sigma, tk, tk, xk, uk, z, c.fd_step);
                hu += su * q_hat[s];
                scale += std::abs(su * q_hat[s]);
            }
            for (std::size_t i = 0; i < n_marks; ++i) {
                const double nu = paths.levy.intensity * paths.levy.marks[i].prob;
                const double zeta = paths.levy.marks[i].zeta;
                h0 += c.gamma(tk, tk, xk, uk, z, zeta) * r_hat(i)[s] * nu;
                hx += coeff::jump_partial_x(c.gamma_x, c.gamma, tk, tk, xk, uk, z, zeta, c.fd_step) *
                      r_hat(i)[s] * nu;
                const double gu =
                    coeff::jump_partial_u(c.gamma_u, c.gamma, tk, tk, xk, uk, z, zeta, c.fd_step);
                hu += gu * r_hat(i)[s] * nu;
                scale += std::abs(gu * r_hat(i)[s] * nu);
            }

            sol.h1.at(s, k) = h1;
            sol.h_value.at(s, k) = h0 + h1;
            sol.dh_dx.at(s, k) = hx + h1x;
            sol.dh_du.at(s, k) = hu + h1u;
            sol.du_scale.at(s, k) = scale + std::abs(h1u);
            sol.q.at(s, k) = q_hat[s];
            for (std::size_t i = 0; i < n_marks; ++i) sol.r[i].at(s, k) = r_hat(i)[s];
            const double pk = p_bar[s] + sol.dh_dx.at(s, k) * grid.dt;
            if (!std::isfinite(pk))
                throw numeric_error("solve_adjoint_bsde: non-finite adjoint at step " +
                                    std::to_string(k));
            sol.p.at(s, k) = pk;
        }
    }
    return sol;
}

// Hamiltonian at a probe point (x, u) away from the trajectory, holding the
// adjoint data of one scenario at one kept time slice fixed.
inline double hamiltonian_probe(const AdjointProblem& prob, const AdjointSolution& sol,
                                const TraceSlice& slice, const DriverPaths& paths,
                                const TimeGrid& grid, std::size_t scenario, double x, double u) {
    const CoefficientSet& c = prob.coeffs;
    const std::size_t k = slice.k;
    const double tk = grid.t[k];
    const double z = prob.z;
    const double m = prob.field->density(k, z, scenario);
    const detail::KernelDerivs kd{c};
    const std::size_t n_marks = sol.r.size();

    double h = prob.perf.f_at(tk, x, u, z) * m;
    const double p_here = sol.p.at(scenario, k);
    if (c.b) h += c.b(tk, tk, x, u, z) * p_here;
    if (c.sigma) h += c.sigma(tk, tk, x, u, z) * sol.q.at(scenario, k);
    for (std::size_t i = 0; i < n_marks; ++i)
        h += c.gamma(tk, tk, x, u, z, paths.levy.marks[i].zeta) * sol.r[i].at(scenario, k) *
             paths.levy.intensity * paths.levy.marks[i].prob;

    if (!sol.history_terms) return h; // flat kernels carry no history part

    const auto w = trapezoid_weights(k, grid.N, grid.dt);
    for (std::size_t j = k; j <= grid.N; ++j) {
        const double sj = grid.t[j];
        const double pv = (j == k) ? p_here : slice.p_proj[j - k - 1][scenario];
        const double tb = (j == k) ? sol.q.at(scenario, k) : slice.trace_b[j - k - 1][scenario];
        if (c.b) h += w[j - k] * kd.b_t(sj, tk, x, u, z) * pv;
        if (c.sigma) h += w[j - k] * kd.sigma_t(sj, tk, x, u, z) * tb;
        for (std::size_t i = 0; i < n_marks; ++i) {
            const double tn =
                (j == k) ? sol.r[i].at(scenario, k) : slice.trace_n[i][j - k - 1][scenario];
            h += w[j - k] * paths.levy.intensity * paths.levy.marks[i].prob *
                 kd.gamma_t(sj, tk, x, u, z, paths.levy.marks[i].zeta) * tn;
        }
    }
    return h;
}

// One-shot projections for coefficient sets with no state feedback: the
// adjoint is then E[g_x(X(T), z) M(T, z) | F_t] directly, and q, r are its
// increment covariances.  Refuses when the coefficients do depend on x.
inline AdjointSolution reduced_adjoint(const AdjointProblem& prob, const ControlField& control,
                                       const StateField& state, const DriverPaths& paths,
                                       const TimeGrid& grid, const StatsBuilder& builder,
                                       const AdjointOptions& opts = {}) {
    if (prob.field == nullptr) throw std::invalid_argument("reduced_adjoint: field required");
    const CoefficientSet& c = prob.coeffs;
    const double z = prob.z;
    {
        const double us[] = {0.1, 0.8};
        const double ts[] = {0.0, 0.4 * grid.T, grid.T};
        for (double t : ts)
            for (double s : ts)
                for (double u : us) {
                    auto differs = [&](double a, double b) {
                        return std::abs(a - b) > 1e-10 * (1.0 + std::abs(a));
                    };
                    if (c.b && differs(c.b(t, s, 0.2, u, z), c.b(t, s, 1.1, u, z)))
                        throw std::invalid_argument(
                            "reduced_adjoint: drift kernel depends on the state");
                    if (c.sigma && differs(c.sigma(t, s, 0.2, u, z), c.sigma(t, s, 1.1, u, z)))
                        throw std::invalid_argument(
                            "reduced_adjoint: diffusion kernel depends on the state");
                    if (c.gamma && differs(c.gamma(t, s, 0.2, u, z, 1.0), c.gamma(t, s, 1.1, u, z, 1.0)))
                        throw std::invalid_argument(
                            "reduced_adjoint: jump kernel depends on the state");
                    if (prob.perf.f &&
                        differs(prob.perf.f(t, 0.2, u, z), prob.perf.f(t, 1.1, u, z)))
                        throw std::invalid_argument(
                            "reduced_adjoint: running reward depends on the state");
                }
    }

    // With x-free coefficients the adjoint is the martingale E[Y | F_t] with
    // Y = g_x(X(T), z) M(T, z), all later-node projections coincide with the
    // current one, and the traces are constant across later nodes.  Each time
    // slice is therefore a single regression family on Y.
    const DonskerField& field = *prob.field;
    const PerformanceSpec& perf = prob.perf;
    const std::size_t N = grid.N;
    const std::size_t n = paths.n_scenarios;
    const std::size_t n_marks = paths.levy.has_jumps() && c.gamma ? paths.levy.marks.size() : 0;
    const bool history = opts.force_history || !kernels_time_independent(c, grid, z);
    const detail::KernelDerivs kd{c};

    AdjointSolution sol;
    sol.history_terms = history;
    sol.p = Field(n, N + 1);
    sol.q = Field(n, N);
    sol.r.assign(n_marks, Field(n, N));
    sol.h_value = Field(n, N);
    sol.h1 = Field(n, N);
    sol.dh_dx = Field(n, N);
    sol.dh_du = Field(n, N);
    sol.du_scale = Field(n, N);

    std::vector<Field> dn;
    for (std::size_t i = 0; i < n_marks; ++i)
        dn.push_back(detail::compensated_mark_increments(paths, grid, i));

    std::vector<double> y(n);
    for (std::size_t s = 0; s < n; ++s) {
        y[s] = perf.g_x_at(state.x.at(s, N), z) * field.density(N, z, s);
        sol.p.at(s, N) = y[s];
    }

    for (std::size_t k = 0; k < N; ++k) {
        const ConditioningSet cs = builder(k);
        const ConditionalRegression reg = detail::build_regression(cs, opts.regression);
        const double tk = grid.t[k];

        const FitResult pf = reg.fit(y);
        detail::merge_diag(sol.worst_diag, pf.diag);
        std::vector<std::span<const double>> cspans;
        std::vector<std::vector<double>> cts(1 + n_marks, std::vector<double>(n));
        for (std::size_t s = 0; s < n; ++s)
            cts[0][s] = (y[s] - pf.fitted[s]) * paths.db.at(s, k) / grid.dt;
        for (std::size_t i = 0; i < n_marks; ++i) {
            const double scale = paths.levy.intensity * paths.levy.marks[i].prob * grid.dt;
            for (std::size_t s = 0; s < n; ++s)
                cts[i + 1][s] = (y[s] - pf.fitted[s]) * dn[i].at(s, k) / scale;
        }
        for (const auto& t : cts) cspans.emplace_back(t);
        const auto fits = reg.fit_many(cspans);
        const auto& q_hat = fits[0];

        if (std::find(opts.keep_trace_at.begin(), opts.keep_trace_at.end(), k) !=
            opts.keep_trace_at.end()) {
            if (!history)
                throw std::invalid_argument(
                    "reduced_adjoint: trace slices need the history terms enabled");
            TraceSlice slice;
            slice.k = k;
            slice.p_proj.assign(N - k, pf.fitted);
            slice.trace_b.assign(N - k, q_hat);
            slice.trace_n.resize(n_marks);
            for (std::size_t i = 0; i < n_marks; ++i)
                slice.trace_n[i].assign(N - k, fits[i + 1]);
            sol.slices.push_back(std::move(slice));
        }

        const auto w = trapezoid_weights(k, N, grid.dt);
        for (std::size_t s = 0; s < n; ++s) {
            const double uk = control.eval(k, z, s);
            const double xk = state.x.at(s, k);
            const double m = field.density(k, z, s);

            double h1 = 0.0, h1u = 0.0;
            if (history)
                for (std::size_t j = k; j <= N; ++j) {
                    const double sj = grid.t[j];
                    if (c.b) {
                        h1 += w[j - k] * kd.b_t(sj, tk, xk, uk, z) * pf.fitted[s];
                        h1u += w[j - k] * kd.b_t_u(sj, tk, xk, uk, z) * pf.fitted[s];
                    }
                    if (c.sigma) {
                        h1 += w[j - k] * kd.sigma_t(sj, tk, xk, uk, z) * q_hat[s];
                        h1u += w[j - k] * kd.sigma_t_u(sj, tk, xk, uk, z) * q_hat[s];
                    }
                    for (std::size_t i = 0; i < n_marks; ++i) {
                        const double nu = paths.levy.intensity * paths.levy.marks[i].prob;
                        const double zeta = paths.levy.marks[i].zeta;
                        h1 += w[j - k] * nu * kd.gamma_t(sj, tk, xk, uk, z, zeta) * fits[i + 1][s];
                        h1u += w[j - k] * nu * kd.gamma_t_u(sj, tk, xk, uk, z, zeta) * fits[i + 1][s];
                    }
                }

            double h0 = perf.f_at(tk, xk, uk, z) * m;
            double hu = perf.f_u_at(tk, xk, uk, z) * m;
            double scale = std::abs(hu);
            if (c.b) {
                h0 += c.b(tk, tk, xk, uk, z) * pf.fitted[s];
                const double bu = coeff::partial_u(c.b_u, c.b, tk, tk, xk, uk, z, c.fd_step);
                hu += bu * pf.fitted[s];
                scale += std::abs(bu * pf.fitted[s]);
            }
            if (c.sigma) {
                h0 += c.sigma(tk, tk, xk, uk, z) * q_hat[s];
                const double su = coeff::partial_u(c.sigma_u, c.sigma, tk, tk, xk, uk, z, c.fd_step);
                hu += su * q_hat[s];
                scale += std::abs(su * q_hat[s]);
            }
            for (std::size_t i = 0; i < n_marks; ++i) {
                const double nu = paths.levy.intensity * paths.levy.marks[i].prob;
                const double zeta = paths.levy.marks[i].zeta;
                h0 += c.gamma(tk, tk, xk, uk, z, zeta) * fits[i + 1][s] * nu;
                const double gu =
                    coeff::jump_partial_u(c.gamma_u, c.gamma, tk, tk, xk, uk, z, zeta, c.fd_step);
                hu += gu * fits[i + 1][s] * nu;
                scale += std::abs(gu * fits[i + 1][s] * nu);
            }

            sol.p.at(s, k) = pf.fitted[s];
            sol.q.at(s, k) = q_hat[s];
            for (std::size_t i = 0; i < n_marks; ++i) sol.r[i].at(s, k) = fits[i + 1][s];
            sol.h1.at(s, k) = h1;
            sol.h_value.at(s, k) = h0 + h1;
            sol.dh_dx.at(s, k) = 0.0;
            sol.dh_du.at(s, k) = hu + h1u;
            sol.du_scale.at(s, k) = scale + std::abs(h1u);
        }
    }
    return sol;
}

// Inner Malliavin integral int_t^T E[D_t v(s) | F_t] ds for an adapted path
// field v, one regression family per conditioning time.  Used by the duality
// check that pins the trace estimator against a closed-form expectation.
// With project_targets the scenario values are the fitted projections (smooth
// in the statistics, as the backward solver consumes them); without it they
// are the raw centred products, which have the same mean but carry the full
// sampling noise, so their scenario spread is an honest standard error.
inline Field malliavin_trace_integral(const Field& v, const StatsBuilder& builder,
                                      const DriverPaths& paths, const TimeGrid& grid,
                                      const RegressionSpec& spec = {},
                                      bool project_targets = true) {
    const std::size_t N = grid.N;
    const std::size_t n = v.n_scenarios;
    Field inner(n, N + 1);

    for (std::size_t k = 0; k < N; ++k) {
        const ConditioningSet cs = builder(k);
        const ConditionalRegression reg = detail::build_regression(cs, spec);

        std::vector<std::vector<double>> vj(N - k);
        std::vector<std::span<const double>> targets;
        for (std::size_t j = k + 1; j <= N; ++j) {
            vj[j - k - 1].resize(n);
            for (std::size_t s = 0; s < n; ++s) vj[j - k - 1][s] = v.at(s, j);
            targets.emplace_back(vj[j - k - 1]);
        }
        const auto proj = reg.fit_many(targets);
        std::vector<std::vector<double>> ct(N - k);
        std::vector<std::span<const double>> cspans;
        for (std::size_t m = 0; m < N - k; ++m) {
            ct[m].resize(n);
            for (std::size_t s = 0; s < n; ++s)
                ct[m][s] = (vj[m][s] - proj[m][s]) * paths.db.at(s, k) / grid.dt;
            cspans.emplace_back(ct[m]);
        }
        const auto traces = project_targets ? reg.fit_many(cspans)
                                            : std::vector<std::vector<double>>(ct.begin(), ct.end());

        const auto w = trapezoid_weights(k, N, grid.dt);
        for (std::size_t s = 0; s < n; ++s) {
            double acc = w[0] * traces[0][s]; // diagonal from the first off-node
            for (std::size_t j = k + 1; j <= N; ++j) acc += w[j - k] * traces[j - k - 1][s];
            inner.at(s, k) = acc;
        }
    }
    return inner;
}

} // namespace ivol

#endif
