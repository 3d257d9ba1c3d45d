#ifndef IVOL_PATHS_HPP
#define IVOL_PATHS_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"
#include "ivol/grid.hpp"
#include "ivol/levy.hpp"
#include "ivol/rng.hpp"

namespace ivol {

struct Jump {
    double time = 0.0;       // in (t_step, t_step+1]
    double mark = 0.0;
    std::size_t step = 0;    // containing step index
    std::size_t mark_index = 0;
};

// Simulated Brownian increments and jump records on the base grid [0, T].
// The seed and Levy model are kept so that the signal module can extend the
// same scenarios beyond T reproducibly (extension streams are tagged
// separately, see rng.hpp).
struct DriverPaths {
    std::size_t n_scenarios = 0;
    std::size_t n_steps = 0;
    std::uint64_t seed = 0;
    LevyModel levy;
    Field db;                            // (scenario, step) Brownian increments
    std::vector<std::vector<Jump>> jumps; // per scenario, ordered by time

    double brownian_at(std::size_t s, std::size_t upto_index) const {
        double b = 0.0;
        for (std::size_t k = 0; k < upto_index; ++k) b += db.at(s, k);
        return b;
    }
};

namespace detail {

inline void sample_scenario_brownian(Field& db, std::size_t s, std::size_t n_steps, double dt,
                                     std::uint64_t seed, std::uint64_t tag) {
    CounterRng rng(seed, s, tag);
    const double sq = std::sqrt(dt);
    for (std::size_t k = 0; k < n_steps; ++k) db.at(s, k) = sq * rng.next_normal();
}

inline void sample_scenario_jumps(std::vector<Jump>& out, std::size_t s, std::size_t n_steps,
                                  double dt, double t_offset, std::size_t step_offset,
                                  const LevyModel& levy, std::uint64_t seed, std::uint64_t tag) {
    out.clear();
    if (!levy.has_jumps()) return;
    CounterRng rng(seed, s, tag);
    const double mu = levy.intensity * dt;
    std::vector<double> cdf(levy.marks.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < levy.marks.size(); ++i) {
        acc += levy.marks[i].prob;
        cdf[i] = acc;
    }
    for (std::size_t k = 0; k < n_steps; ++k) {
        const std::uint64_t count = rng.next_poisson(mu);
        for (std::uint64_t j = 0; j < count; ++j) {
            Jump jp;
            const double u_time = rng.next_uniform();
            jp.time = t_offset + dt * (static_cast<double>(k) + u_time);
            jp.step = step_offset + k;
            const double u_mark = rng.next_uniform();
            std::size_t idx = 0;
            while (idx + 1 < cdf.size() && u_mark > cdf[idx]) ++idx;
            jp.mark_index = idx;
            jp.mark = levy.marks[idx].zeta;
            out.push_back(jp);
        }
    }
}

} // namespace detail

inline DriverPaths sample_driver(const TimeGrid& grid, const LevyModel& levy,
                                 std::size_t n_scenarios, std::uint64_t seed) {
    if (n_scenarios == 0) throw std::invalid_argument("sample_driver: n_scenarios must be positive");
    levy.validate();

    DriverPaths p;
    p.n_scenarios = n_scenarios;
    p.n_steps = grid.N;
    p.seed = seed;
    p.levy = levy;
    p.db = Field(n_scenarios, grid.N);
    p.jumps.resize(n_scenarios);
    for (std::size_t s = 0; s < n_scenarios; ++s) {
        detail::sample_scenario_brownian(p.db, s, grid.N, grid.dt, seed, stream::brownian);
        detail::sample_scenario_jumps(p.jumps[s], s, grid.N, grid.dt, 0.0, 0, levy, seed,
                                      stream::jumps);
    }
    return p;
}

// Halves the time resolution by pair-summing Brownian increments and
// re-bucketing jumps, so a coarse solve sees the same underlying scenarios.
// Used for strong-convergence studies against closed forms.
inline DriverPaths coarsen_driver_pairs(const DriverPaths& fine) {
    if (fine.n_steps % 2 != 0)
        throw std::invalid_argument("coarsen_driver_pairs: step count must be even");
    DriverPaths c;
    c.n_scenarios = fine.n_scenarios;
    c.n_steps = fine.n_steps / 2;
    c.seed = fine.seed;
    c.levy = fine.levy;
    c.db = Field(c.n_scenarios, c.n_steps);
    c.jumps.resize(c.n_scenarios);
    for (std::size_t s = 0; s < c.n_scenarios; ++s) {
        for (std::size_t k = 0; k < c.n_steps; ++k)
            c.db.at(s, k) = fine.db.at(s, 2 * k) + fine.db.at(s, 2 * k + 1);
        c.jumps[s] = fine.jumps[s];
        for (auto& jp : c.jumps[s]) jp.step /= 2;
    }
    return c;
}

// Compensated jump integral over [0, upto]:
//   sum over jumps of f(tau, zeta)  -  intensity * sum over steps of
//   dt * sum_i prob_i f(t_k, zeta_i)
// with the compensator evaluated at left endpoints, matching the Euler
// convention used by the forward solvers.
template <typename F>
double compensated_integral(const DriverPaths& paths, const TimeGrid& grid, std::size_t scenario,
                            double upto, F&& f) {
    if (upto < 0.0 || upto > grid.T + 1e-12)
        throw std::invalid_argument("compensated_integral: upto outside [0, T]");
    double jump_sum = 0.0;
    for (const auto& jp : paths.jumps[scenario]) {
        if (jp.time <= upto) jump_sum += f(jp.time, jp.mark);
    }
    double comp = 0.0;
    if (paths.levy.has_jumps()) {
        const auto steps = static_cast<std::size_t>(std::llround(upto / grid.dt));
        for (std::size_t k = 0; k < steps && k < grid.N; ++k) {
            const double tk = grid.t[k];
            comp += paths.levy.nu_integral([&](double z) { return f(tk, z); });
        }
        comp *= grid.dt;
    }
    return jump_sum - comp;
}

} // namespace ivol

#endif
