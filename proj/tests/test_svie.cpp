#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>

#include "ivol/grid.hpp"
#include "ivol/levy.hpp"
#include "ivol/paths.hpp"
#include "ivol/svie.hpp"

using namespace ivol;

namespace {

CoefficientSet gbm_coeffs(double mu, double vol) {
    CoefficientSet c;
    c.xi = [](double, double) { return 1.0; };
    c.b = [mu](double, double, double x, double, double) { return mu * x; };
    c.sigma = [vol](double, double, double x, double, double) { return vol * x; };
    return c;
}

} // namespace

TEST_CASE("time-independent kernels collapse to the plain euler recursion") {
    const TimeGrid g = build_grid(1.0, 32, 1.0);
    LevyModel levy;
    levy.intensity = 1.0;
    levy.marks = {{0.4, 1.0}};
    const DriverPaths paths = sample_driver(g, levy, 50, 31);

    CoefficientSet c = gbm_coeffs(0.05, 0.2);
    c.gamma = [](double, double, double x, double, double, double zeta) { return 0.1 * zeta * x; };
    REQUIRE(kernels_time_independent(c, g, 0.0));

    CoefficientSet slow = c;
    slow.time_dep = KernelTime::dependent; // force the full history rebuild
    const ControlField u = ControlField::constant(0.0);

    const StateField fast = solve_forward(c, u, 0.0, paths, g);
    const StateField generic = solve_forward(slow, u, 0.0, paths, g);
    for (std::size_t s = 0; s < paths.n_scenarios; ++s)
        for (std::size_t k = 0; k <= g.N; ++k)
            REQUIRE(fast.x.at(s, k) ==
                    Catch::Approx(generic.x.at(s, k)).margin(1e-12 * (1.0 + std::abs(fast.x.at(s, k)))));
}

TEST_CASE("deterministic convolution kernel matches the exact euler sum") {
    // b(t, s) = t - s with no noise gives X(t) = t^2/2; the left-point Euler
    // value is dt^2 k (k+1) / 2 exactly, which the solver must reproduce to
    // rounding and which converges at rate dt to the integral.
    const TimeGrid g = build_grid(1.0, 64, 1.0);
    LevyModel off;
    const DriverPaths paths = sample_driver(g, off, 1, 1);

    CoefficientSet c;
    c.b = [](double t, double s, double, double, double) { return t - s; };
    REQUIRE_FALSE(kernels_time_independent(c, g, 0.0));

    const StateField st = solve_forward(c, ControlField::constant(0.0), 0.0, paths, g);
    for (std::size_t k = 0; k <= g.N; ++k) {
        const double exact_euler = g.dt * g.dt * double(k) * double(k + 1) / 2.0;
        REQUIRE(st.x.at(0, k) == Catch::Approx(exact_euler).margin(1e-12));
    }
    REQUIRE(st.x.at(0, g.N) == Catch::Approx(0.5).margin(g.dt));
}

TEST_CASE("compensated jump state is centred when the kernel is odd in the mark") {
    const TimeGrid g = build_grid(1.0, 32, 1.0);
    LevyModel levy;
    levy.intensity = 2.0;
    levy.marks = {{1.0, 0.5}, {-1.0, 0.5}};
    const DriverPaths paths = sample_driver(g, levy, 20000, 77);

    CoefficientSet c;
    c.gamma = [](double, double, double, double, double, double zeta) { return 0.3 * zeta; };
    const StateField st = solve_forward(c, ControlField::constant(0.0), 0.0, paths, g);

    double sum = 0.0, sumsq = 0.0;
    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        const double v = st.x.at(s, g.N);
        sum += v;
        sumsq += v * v;
    }
    const double n = double(paths.n_scenarios);
    const double m = sum / n;
    const double se = std::sqrt((sumsq / n - m * m) / n);
    REQUIRE(std::abs(m) < 3.0 * se);
}

TEST_CASE("control bound violations and blow-ups are reported") {
    const TimeGrid g = build_grid(1.0, 8, 1.0);
    LevyModel off;
    const DriverPaths paths = sample_driver(g, off, 2, 3);

    ControlField bounded = ControlField::constant(2.0);
    bounded.lo = -1.0;
    bounded.hi = 1.0;
    CoefficientSet c = gbm_coeffs(0.0, 0.1);
    REQUIRE_THROWS_AS(solve_forward(c, bounded, 0.0, paths, g), std::invalid_argument);

    CoefficientSet explode;
    explode.xi = [](double, double) { return 4.0; };
    explode.b = [](double, double, double x, double, double) { return x * x * x * x * x; };
    try {
        solve_forward(explode, ControlField::constant(0.0), 0.0, paths, g);
        FAIL("expected a numeric_error");
    } catch (const numeric_error& e) {
        REQUIRE(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("variational solution is the control derivative of the state") {
    const TimeGrid g = build_grid(1.0, 32, 1.0);
    LevyModel off;
    const DriverPaths paths = sample_driver(g, off, 40, 19);

    // Kernels linear in u: the central difference in the direction is exact,
    // so the variational path must match it to rounding.
    CoefficientSet c;
    c.xi = [](double, double) { return 0.5; };
    c.b = [](double t, double s, double x, double u, double) { return 0.2 * x + (1.0 + t - s) * u; };
    c.sigma = [](double, double, double x, double u, double) { return 0.1 * x + 0.3 * u; };

    const ControlField u0 = ControlField::constant(0.4);
    const ControlField dir = ControlField::constant(1.0);
    const double a = 1e-4;
    const ControlField up = ControlField::constant(0.4 + a);
    const ControlField dn = ControlField::constant(0.4 - a);

    const StateField base = solve_forward(c, u0, 0.0, paths, g);
    const StateField chi = solve_variational(c, u0, dir, base, paths, g);
    const StateField xp = solve_forward(c, up, 0.0, paths, g);
    const StateField xn = solve_forward(c, dn, 0.0, paths, g);

    for (std::size_t s = 0; s < paths.n_scenarios; ++s)
        for (std::size_t k = 0; k <= g.N; ++k) {
            const double fd = (xp.x.at(s, k) - xn.x.at(s, k)) / (2.0 * a);
            REQUIRE(chi.x.at(s, k) == Catch::Approx(fd).margin(5e-6));
        }
}

TEST_CASE("variational solution handles state feedback and jumps") {
    const TimeGrid g = build_grid(1.0, 16, 1.0);
    LevyModel levy;
    levy.intensity = 1.0;
    levy.marks = {{0.5, 1.0}};
    const DriverPaths paths = sample_driver(g, levy, 30, 23);

    CoefficientSet c;
    c.xi = [](double, double) { return 1.0; };
    c.b = [](double, double, double x, double u, double) { return 0.3 * x * u; };
    c.sigma = [](double, double, double x, double, double) { return 0.2 * x; };
    c.gamma = [](double, double, double x, double u, double, double zeta) {
        return zeta * (0.1 * x + 0.2 * u);
    };

    const ControlField u0 = ControlField::constant(0.5);
    const ControlField dir = ControlField::constant(1.0);
    const double a = 1e-5;

    const StateField base = solve_forward(c, u0, 0.0, paths, g);
    const StateField chi = solve_variational(c, u0, dir, base, paths, g);
    const StateField xp = solve_forward(c, ControlField::constant(0.5 + a), 0.0, paths, g);
    const StateField xn = solve_forward(c, ControlField::constant(0.5 - a), 0.0, paths, g);

    for (std::size_t s = 0; s < paths.n_scenarios; ++s) {
        const double fd = (xp.x.at(s, g.N) - xn.x.at(s, g.N)) / (2.0 * a);
        REQUIRE(chi.x.at(s, g.N) == Catch::Approx(fd).margin(1e-4 * (1.0 + std::abs(fd))));
    }
}
