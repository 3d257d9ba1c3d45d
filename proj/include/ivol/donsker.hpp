#ifndef IVOL_DONSKER_HPP
#define IVOL_DONSKER_HPP

#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ivol/chaos.hpp"
#include "ivol/core.hpp"
#include "ivol/grid.hpp"
#include "ivol/levy.hpp"
#include "ivol/paths.hpp"

namespace ivol {

// Fourier quadrature controls for the conditional density field.
//   x_cutoff == 0 selects the envelope rule: |x| up to the point where
//   exp(-x^2 V_B(t)/2) drops below the envelope_floor.
struct QuadratureSpec {
    std::size_t n_nodes = 2048;   // trapezoid intervals, must be even
    double x_cutoff = 0.0;        // 0 = automatic per-time cutoff
    double envelope_floor = 1e-12;
    double density_floor = 1e-12; // ratio fields refuse below this
    double imag_tol = 1e-8;       // health check on the real-part extraction

    void validate() const {
        if (n_nodes < 8 || n_nodes % 2 != 0)
            throw std::invalid_argument("QuadratureSpec: n_nodes must be even and at least 8");
        if (!(envelope_floor > 0.0) || !(density_floor > 0.0) || !(imag_tol > 0.0))
            throw std::invalid_argument("QuadratureSpec: floors must be positive");
    }
};

// Conditional law fields of the anticipated signal, all evaluated at base-grid
// times strictly before the signal horizon:
//   density       m(t,z)      = E[ delta_Z(z) | F_t ]
//   derivative_b  m_B(t,z)    = E[ D_t delta_Z(z) | F_t ]      (Brownian direction)
//   derivative_n  m_N(t,z,i)  = E[ D_{t,zeta_i} delta_Z(z) | F_t ]
//   phi_ratio     m_B / m, the logarithmic-derivative drift used by the
//                 portfolio pipeline.
//
// In the Gaussian case (psi == 0) the quadrature collapses to closed forms;
// the *_quadrature entry points force the generic route for cross-checking.
class DonskerField {
public:
    DonskerField(ChaosSpec spec, LevyModel levy, const SignalPaths* signal, const TimeGrid& grid,
                 QuadratureSpec quad = {})
        : spec_(std::move(spec)), levy_(std::move(levy)), signal_(signal), grid_(grid),
          quad_(quad), unit_(false) {
        quad_.validate();
        if (signal_ == nullptr) throw std::invalid_argument("DonskerField: signal paths required");
        gaussian_ = signal_is_gaussian(spec_, levy_, grid_);
        precompute_variances();
        if (!gaussian_) precompute_kernels();
    }

    // Degenerate field for classical (non-insider) problems: density 1,
    // derivatives 0.  Supported so the control machinery can run without an
    // enlarged filtration.
    static DonskerField unit(const TimeGrid& grid) { return DonskerField(grid); }

    bool is_unit() const { return unit_; }
    bool is_gaussian() const { return gaussian_; }
    const TimeGrid& grid() const { return grid_; }
    const QuadratureSpec& quadrature() const { return quad_; }

    double signal_at(std::size_t t_index, std::size_t scenario) const {
        return signal_->z.at(scenario, t_index);
    }

    double v_b(std::size_t t_index) const { return v_b_[t_index]; }

    double beta_at(std::size_t t_index) const {
        return unit_ ? 0.0 : spec_.beta(grid_.t[t_index]);
    }

    // Realized signal value (the variable the insider actually observes).
    double signal_terminal(std::size_t scenario) const {
        return unit_ ? 0.0 : signal_->terminal[scenario];
    }

    double density(std::size_t t_index, double z, std::size_t scenario) const {
        if (unit_) return 1.0;
        check_time(t_index);
        if (gaussian_) return gaussian_density(v_b_[t_index], z - signal_at(t_index, scenario));
        return quad_eval(t_index, z, scenario, Mode::density, 0);
    }

    double density_quadrature(std::size_t t_index, double z, std::size_t scenario) const {
        require_real_field("density_quadrature");
        check_time(t_index);
        return quad_eval(t_index, z, scenario, Mode::density, 0);
    }

    double derivative_b(std::size_t t_index, double z, std::size_t scenario) const {
        if (unit_) return 0.0;
        check_time(t_index);
        if (gaussian_) {
            const double v = v_b_[t_index];
            const double d = z - signal_at(t_index, scenario);
            return spec_.beta(grid_.t[t_index]) * d / v * gaussian_density(v, d);
        }
        return quad_eval(t_index, z, scenario, Mode::derivative_b, 0);
    }

    double derivative_b_quadrature(std::size_t t_index, double z, std::size_t scenario) const {
        require_real_field("derivative_b_quadrature");
        check_time(t_index);
        return quad_eval(t_index, z, scenario, Mode::derivative_b, 0);
    }

    double derivative_n(std::size_t t_index, double z, std::size_t scenario,
                        std::size_t mark_index) const {
        if (unit_) return 0.0;
        check_time(t_index);
        if (mark_index >= levy_.marks.size())
            throw std::invalid_argument("derivative_n: mark index out of range");
        if (gaussian_) return 0.0; // psi vanishes, jump derivative with it
        return quad_eval(t_index, z, scenario, Mode::derivative_n, mark_index);
    }

    double phi_ratio(std::size_t t_index, double z, std::size_t scenario) const {
        if (unit_) return 0.0;
        check_time(t_index);
        if (gaussian_) {
            const double v = v_b_[t_index];
            return spec_.beta(grid_.t[t_index]) * (z - signal_at(t_index, scenario)) / v;
        }
        const double m = density(t_index, z, scenario);
        if (m < quad_.density_floor)
            throw numeric_error("phi_ratio: conditional density below floor (far-tail z)");
        return derivative_b(t_index, z, scenario) / m;
    }

    // d(phi)/dz at fixed signal value; exact in the Gaussian case, central
    // difference otherwise.  Needed by the corrected exponential scheme in the
    // portfolio module.
    double phi_z_slope(std::size_t t_index, double z, std::size_t scenario) const {
        if (unit_) return 0.0;
        check_time(t_index);
        if (gaussian_) return spec_.beta(grid_.t[t_index]) / v_b_[t_index];
        const double h = 1e-5 * (1.0 + std::abs(z));
        return (phi_ratio(t_index, z + h, scenario) - phi_ratio(t_index, z - h, scenario)) /
               (2.0 * h);
    }

    // Density on a whole z-grid at one (t, scenario), reusing the kernel nodes.
    std::vector<double> density_profile(std::size_t t_index, std::span<const double> zs,
                                        std::size_t scenario) const {
        std::vector<double> out(zs.size());
        for (std::size_t i = 0; i < zs.size(); ++i) out[i] = density(t_index, zs[i], scenario);
        return out;
    }

    double remaining_std(std::size_t t_index) const {
        return std::sqrt(v_b_[t_index] + v_n_[t_index]);
    }

private:
    enum class Mode { density, derivative_b, derivative_n };

    explicit DonskerField(const TimeGrid& grid)
        : signal_(nullptr), grid_(grid), unit_(true), gaussian_(true) {}

    void require_real_field(const char* who) const {
        if (unit_) throw std::invalid_argument(std::string(who) + ": unit field has no quadrature");
    }

    void check_time(std::size_t t_index) const {
        if (t_index >= v_b_.size() || !(v_b_[t_index] > 0.0))
            throw std::invalid_argument(
                "DonskerField: time must lie on the base grid strictly before the signal horizon");
    }

    static double gaussian_density(double v, double d) {
        return std::exp(-d * d / (2.0 * v)) / std::sqrt(2.0 * pi_const * v);
    }

    void precompute_variances() {
        v_b_.assign(grid_.N + 1, 0.0);
        v_n_.assign(grid_.N + 1, 0.0);
        for (std::size_t k = 0; k <= grid_.N; ++k) {
            if (grid_.t[k] >= grid_.t0_snapped - 1e-15) {
                v_b_[k] = 0.0;
                continue;
            }
            const auto rv = remaining_variance(spec_, levy_, grid_, grid_.t[k]);
            v_b_[k] = rv.v_b;
            v_n_[k] = rv.v_n;
        }
    }

    struct KernelNode {
        double x;
        double w;
        std::complex<double> kappa; // exp(Psi(t,x) - x^2 V_B(t)/2)
    };

    double cutoff_at(std::size_t k) const {
        if (quad_.x_cutoff > 0.0) {
            if (std::exp(-0.5 * sqr(quad_.x_cutoff) * v_b_[k]) >= quad_.envelope_floor)
                throw std::invalid_argument(
                    "QuadratureSpec: explicit x_cutoff violates the envelope rule");
            return quad_.x_cutoff;
        }
        return std::sqrt(-2.0 * std::log(quad_.envelope_floor) / v_b_[k]);
    }

    // Psi(t, x) = sum_i lambda p_i int_t^T0 (e^{i x psi(s, zeta_i)} - 1
    //                                         - i x psi(s, zeta_i)) ds
    std::complex<double> jump_exponent(std::size_t k, double x) const {
        const std::size_t last = grid_.horizon_steps();
        if (k >= last) return {0.0, 0.0};
        std::complex<double> acc{0.0, 0.0};
        const auto w = trapezoid_weights(k, last, grid_.dt);
        for (std::size_t j = k; j <= last; ++j) {
            const double s = grid_.lattice_time(j);
            std::complex<double> inner{0.0, 0.0};
            for (const auto& m : levy_.marks) {
                const double ps = spec_.psi_at(s, m.zeta);
                inner += m.prob * (std::polar(1.0, x * ps) - std::complex<double>(1.0, x * ps));
            }
            acc += w[j - k] * levy_.intensity * inner;
        }
        return acc;
    }

    void precompute_kernels() {
        kernels_.resize(grid_.N + 1);
        for (std::size_t k = 0; k <= grid_.N; ++k) {
            if (!(v_b_[k] > 0.0)) continue;
            const double cut = cutoff_at(k);
            const std::size_t n = quad_.n_nodes;
            const double h = 2.0 * cut / static_cast<double>(n);
            auto& nodes = kernels_[k];
            nodes.resize(n + 1);
            for (std::size_t j = 0; j <= n; ++j) {
                const double x = -cut + h * static_cast<double>(j);
                KernelNode kn;
                kn.x = x;
                kn.w = (j == 0 || j == n) ? 0.5 * h : h;
                kn.kappa = std::exp(jump_exponent(k, x) - 0.5 * sqr(x) * v_b_[k]);
                nodes[j] = kn;
            }
        }
    }

    // Gaussian-case nodes are built on demand (cheap, no jump exponent).
    std::vector<KernelNode> gaussian_nodes(std::size_t k) const {
        const double cut = cutoff_at(k);
        const std::size_t n = quad_.n_nodes;
        const double h = 2.0 * cut / static_cast<double>(n);
        std::vector<KernelNode> nodes(n + 1);
        for (std::size_t j = 0; j <= n; ++j) {
            const double x = -cut + h * static_cast<double>(j);
            nodes[j] = {x, (j == 0 || j == n) ? 0.5 * h : h,
                        std::complex<double>(std::exp(-0.5 * sqr(x) * v_b_[k]), 0.0)};
        }
        return nodes;
    }

    double quad_eval(std::size_t k, double z, std::size_t scenario, Mode mode,
                     std::size_t mark_index) const {
        const std::vector<KernelNode>* nodes;
        std::vector<KernelNode> scratch;
        if (gaussian_) {
            scratch = gaussian_nodes(k);
            nodes = &scratch;
        } else {
            nodes = &kernels_[k];
        }
        const double shift = signal_at(k, scenario) - z;
        const double t = grid_.t[k];
        const double beta_t = spec_.beta(t);
        const double psi_t =
            (mode == Mode::derivative_n) ? spec_.psi_at(t, levy_.marks[mark_index].zeta) : 0.0;

        std::complex<double> acc{0.0, 0.0};
        for (const auto& kn : *nodes) {
            std::complex<double> term = std::polar(1.0, kn.x * shift) * kn.kappa;
            switch (mode) {
            case Mode::density: break;
            case Mode::derivative_b: term *= std::complex<double>(0.0, kn.x * beta_t); break;
            case Mode::derivative_n:
                term *= std::polar(1.0, kn.x * psi_t) - std::complex<double>(1.0, 0.0);
                break;
            }
            acc += kn.w * term;
        }
        acc /= 2.0 * pi_const;
        if (std::abs(acc.imag()) > quad_.imag_tol * std::max(1.0, std::abs(acc.real())))
            throw numeric_error("DonskerField: imaginary residue exceeds quadrature health bound");
        double val = acc.real();
        if (mode == Mode::density && val < 0.0) val = 0.0; // clamp tiny negative tails
        return val;
    }

    ChaosSpec spec_;
    LevyModel levy_;
    const SignalPaths* signal_;
    TimeGrid grid_;
    QuadratureSpec quad_;
    bool unit_ = false;
    bool gaussian_ = true;
    std::vector<double> v_b_, v_n_;
    std::vector<std::vector<KernelNode>> kernels_;
};

} // namespace ivol

#endif
