#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>

#include "ivol/chaos.hpp"
#include "ivol/grid.hpp"
#include "ivol/levy.hpp"
#include "ivol/paths.hpp"

using namespace ivol;

namespace {

ChaosSpec brownian_spec(double horizon) {
    ChaosSpec spec;
    spec.beta = [](double) { return 1.0; };
    spec.horizon = horizon;
    return spec;
}

} // namespace

TEST_CASE("unit-loading signal reproduces the brownian path") {
    const TimeGrid g = build_grid(1.0, 32, 1.0);
    LevyModel off;
    const DriverPaths paths = sample_driver(g, off, 200, 11);
    const SignalPaths sig = simulate_signal(brownian_spec(1.0), paths, g);
    for (std::size_t s = 0; s < paths.n_scenarios; ++s)
        for (std::size_t k = 0; k <= g.N; ++k)
            REQUIRE(sig.z.at(s, k) == Catch::Approx(paths.brownian_at(s, k)).margin(1e-14));
    for (std::size_t s = 0; s < paths.n_scenarios; ++s)
        REQUIRE(sig.terminal[s] == Catch::Approx(sig.z.at(s, g.N)));
}

TEST_CASE("remaining variance uses trapezoid weights on the lattice") {
    ChaosSpec spec;
    spec.beta = [](double s) { return s; };
    spec.horizon = 1.0;
    LevyModel off;
    const TimeGrid g = build_grid(1.0, 64, 1.0);
    const RemainingVariance v0 = remaining_variance(spec, off, g, 0.0);
    REQUIRE(std::abs(v0.v_b - 1.0 / 3.0) < 1e-3);
    const RemainingVariance vT = remaining_variance(spec, off, g, 1.0);
    REQUIRE(vT.v_b == 0.0);
    const RemainingVariance vh = remaining_variance(spec, off, g, 0.5);
    REQUIRE(std::abs(vh.v_b - (1.0 - 0.125) / 3.0) < 1e-3);
}

TEST_CASE("jump loading contributes its own remaining variance") {
    ChaosSpec spec;
    spec.beta = [](double) { return 1.0; };
    spec.psi = [](double, double zeta) { return 0.5 * zeta; };
    spec.horizon = 1.0;
    LevyModel levy;
    levy.intensity = 2.0;
    levy.marks = {{1.0, 0.5}, {-1.0, 0.5}};
    const TimeGrid g = build_grid(1.0, 64, 1.0);
    const RemainingVariance v = remaining_variance(spec, levy, g, 0.0);
    REQUIRE(std::abs(v.v_b - 1.0) < 1e-10);
    // lambda * sum_i p_i * psi^2 integrated over [0,1] = 2 * 0.25 = 0.5
    REQUIRE(std::abs(v.v_n - 0.5) < 1e-10);
}

TEST_CASE("signal variance at the horizon matches the loadings") {
    ChaosSpec spec;
    spec.beta = [](double s) { return 1.0 + s; };
    spec.psi = [](double, double zeta) { return 0.3 * zeta; };
    spec.horizon = 1.0;
    LevyModel levy;
    levy.intensity = 1.0;
    levy.marks = {{1.0, 1.0}};
    const TimeGrid g = build_grid(1.0, 64, 1.0);
    const DriverPaths paths = sample_driver(g, levy, 20000, 7);
    const SignalPaths sig = simulate_signal(spec, paths, g);

    double m = 0.0, v = 0.0;
    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        m += sig.terminal[s];
        v += sig.terminal[s] * sig.terminal[s];
    }
    const double n = double(paths.n_scenarios);
    m /= n;
    v = v / n - m * m;
    const RemainingVariance expect = remaining_variance(spec, levy, g, 0.0);
    const double target = expect.v_b + expect.v_n;
    REQUIRE(std::abs(m) < 3.0 * std::sqrt(target / n));
    REQUIRE(std::abs(v - target) < 3.0 * target * std::sqrt(2.0 / n) + 0.05);
}

TEST_CASE("signal extension beyond the trading horizon is deterministic") {
    ChaosSpec spec;
    spec.beta = [](double) { return 1.0; };
    spec.psi = [](double, double zeta) { return zeta; };
    spec.horizon = 2.0;
    LevyModel levy;
    levy.intensity = 1.0;
    levy.marks = {{0.5, 1.0}};
    const TimeGrid g = build_grid(1.0, 16, 2.0);
    REQUIRE(g.ext_steps == 16);
    const DriverPaths paths = sample_driver(g, levy, 100, 21);
    const SignalPaths a = simulate_signal(spec, paths, g);
    const SignalPaths b = simulate_signal(spec, paths, g);
    bool beyond_base = false;
    for (std::size_t s = 0; s < 100; ++s) {
        REQUIRE(a.terminal[s] == b.terminal[s]);
        if (a.terminal[s] != a.z.at(s, g.N)) beyond_base = true;
    }
    REQUIRE(beyond_base);
}

TEST_CASE("gaussian detection probes the jump loading on the lattice") {
    LevyModel levy;
    levy.intensity = 1.0;
    levy.marks = {{1.0, 1.0}};
    const TimeGrid g = build_grid(1.0, 8, 1.0);

    ChaosSpec gauss = brownian_spec(1.0);
    REQUIRE(signal_is_gaussian(gauss, levy, g));

    ChaosSpec with_jumps = gauss;
    with_jumps.psi = [](double, double zeta) { return zeta; };
    REQUIRE_FALSE(signal_is_gaussian(with_jumps, levy, g));

    ChaosSpec zero_loading = gauss;
    zero_loading.psi = [](double, double) { return 0.0; };
    REQUIRE(signal_is_gaussian(zero_loading, levy, g));

    LevyModel off;
    REQUIRE(signal_is_gaussian(with_jumps, off, g));
}

TEST_CASE("degenerate loadings are rejected") {
    ChaosSpec spec;
    spec.beta = [](double s) { return s > 0.5 ? std::nan("") : 1.0; };
    spec.horizon = 1.0;
    LevyModel off;
    const TimeGrid g = build_grid(1.0, 8, 1.0);
    const DriverPaths paths = sample_driver(g, off, 4, 1);
    REQUIRE_THROWS_AS(simulate_signal(spec, paths, g), std::invalid_argument);

    ChaosSpec mismatched = brownian_spec(0.7);
    REQUIRE_THROWS_AS(simulate_signal(mismatched, paths, g), std::invalid_argument);
}
