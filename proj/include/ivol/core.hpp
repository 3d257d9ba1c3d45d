#ifndef IVOL_CORE_HPP
#define IVOL_CORE_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ivol {

// Thrown when a numeric invariant is violated at runtime (blow-up, quadrature
// health check, positivity loss).  Configuration/precondition problems use
// std::invalid_argument instead; the CLI maps the two to distinct exit codes.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Scenario-major matrix of field values: row = scenario, column = grid point.
struct Field {
    std::size_t n_scenarios = 0;
    std::size_t n_points = 0;
    std::vector<double> v;

    Field() = default;
    Field(std::size_t scenarios, std::size_t points, double fill = 0.0)
        : n_scenarios(scenarios), n_points(points), v(scenarios * points, fill) {}

    double& at(std::size_t s, std::size_t k) { return v[s * n_points + k]; }
    double at(std::size_t s, std::size_t k) const { return v[s * n_points + k]; }

    std::span<double> scenario(std::size_t s) { return {v.data() + s * n_points, n_points}; }
    std::span<const double> scenario(std::size_t s) const {
        return {v.data() + s * n_points, n_points};
    }

    // Column slice (one grid point across scenarios), copied out.
    std::vector<double> column(std::size_t k) const {
        std::vector<double> out(n_scenarios);
        for (std::size_t s = 0; s < n_scenarios; ++s) out[s] = at(s, k);
        return out;
    }
};

inline double mean(std::span<const double> x) {
    if (x.empty()) return 0.0;
    double acc = 0.0;
    for (double xi : x) acc += xi;
    return acc / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
    if (x.size() < 2) return 0.0;
    const double m = mean(x);
    double acc = 0.0;
    for (double xi : x) acc += (xi - m) * (xi - m);
    return acc / static_cast<double>(x.size() - 1);
}

// Standard error of the sample mean.
inline double standard_error(std::span<const double> x) {
    if (x.size() < 2) return 0.0;
    return std::sqrt(variance(x) / static_cast<double>(x.size()));
}

inline double rms(std::span<const double> x) {
    if (x.empty()) return 0.0;
    double acc = 0.0;
    for (double xi : x) acc += xi * xi;
    return std::sqrt(acc / static_cast<double>(x.size()));
}

inline bool all_finite(std::span<const double> x) {
    for (double xi : x)
        if (!std::isfinite(xi)) return false;
    return true;
}

// Central difference with a scale-aware step.  Used as the fallback when a
// coefficient set does not supply an analytic partial.
template <typename F>
double central_diff(F&& f, double x, double step_rel = 1e-5) {
    const double h = step_rel * (1.0 + std::abs(x));
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Trapezoid weights on a uniform grid restricted to [first, last] (inclusive
// indices).  Degenerate single-point ranges get weight zero.
inline std::vector<double> trapezoid_weights(std::size_t first, std::size_t last, double dt) {
    if (last < first) throw std::invalid_argument("trapezoid_weights: empty index range");
    std::vector<double> w(last - first + 1, dt);
    if (w.size() == 1) {
        w[0] = 0.0;
        return w;
    }
    w.front() = 0.5 * dt;
    w.back() = 0.5 * dt;
    return w;
}

inline double sqr(double x) { return x * x; }

constexpr double pi_const = 3.14159265358979323846;

} // namespace ivol

#endif
