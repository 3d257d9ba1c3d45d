#ifndef IVOL_REGRESSION_HPP
#define IVOL_REGRESSION_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"

namespace ivol {

// Controls for the least-squares Monte Carlo projections.  degree is the
// total polynomial degree over the standardized conditioning statistics;
// aug_degree bounds the monomials multiplied by an optional positive
// prefactor statistic (conditional density, exponential martingale) that the
// solvers add when the target is known to live on such a ray.
struct RegressionSpec {
    int degree = 3;
    int aug_degree = 2;
    double singular_rel_tol = 1e-9;
};

struct RegressionDiagnostics {
    std::size_t n_columns = 0;
    std::size_t effective_rank = 0;
    bool rank_deficient = false;
};

struct FitResult {
    std::vector<double> fitted;
    RegressionDiagnostics diag;
};

/// One conditioning time: build the design matrix once, factorize once, then
// project as many targets as needed onto it.
class ConditionalRegression {
public:
    ConditionalRegression(const std::vector<std::span<const double>>& stats, int degree,
                          std::span<const double> aug = {}, int aug_degree = 0,
                          double singular_rel_tol = 1e-9) {
        if (stats.empty() && aug.empty())
            throw std::invalid_argument("ConditionalRegression: no conditioning statistics");
        n_ = stats.empty() ? aug.size() : stats.front().size();
        for (const auto& s : stats)
            if (s.size() != n_) throw std::invalid_argument("ConditionalRegression: ragged stats");
        if (!aug.empty() && aug.size() != n_)
            throw std::invalid_argument("ConditionalRegression: ragged augmentation column");
        if (n_ < 4) throw std::invalid_argument("ConditionalRegression: too few samples");

        // Standardize the raw statistics; constant columns carry no
        // information beyond the intercept and are dropped from the monomials.
        std::vector<std::vector<double>> zs;
        for (const auto& s : stats) {
            const double m = mean(s);
            const double sd = std::sqrt(variance(s));
            if (sd < 1e-13 * (1.0 + std::abs(m))) continue;
            std::vector<double> col(n_);
            for (std::size_t i = 0; i < n_; ++i) col[i] = (s[i] - m) / sd;
            zs.push_back(std::move(col));
        }

        const auto monos = multi_indices(zs.size(), degree);
        std::size_t cols = monos.size();
        std::vector<std::vector<std::size_t>> aug_monos;
        double aug_scale = 1.0;
        if (!aug.empty()) {
            aug_monos = multi_indices(zs.size(), aug_degree);
            cols += aug_monos.size();
            aug_scale = rms(aug);
            if (aug_scale <= 0.0) aug_scale = 1.0;
        }

        design_.resize(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(cols));
        std::size_t c = 0;
        for (const auto& mi : monos) fill_monomial(zs, mi, nullptr, 1.0, c++);
        for (const auto& mi : aug_monos) fill_monomial(zs, mi, &aug, aug_scale, c++);

        qr_.setThreshold(singular_rel_tol);
        qr_.compute(design_);
        diag_.n_columns = cols;
        diag_.effective_rank = static_cast<std::size_t>(qr_.rank());
        diag_.rank_deficient = diag_.effective_rank < cols;
    }

    FitResult fit(std::span<const double> target) const {
        if (target.size() != n_) throw std::invalid_argument("fit: target size mismatch");
        Eigen::MatrixXd y(static_cast<Eigen::Index>(n_), 1);
        for (std::size_t i = 0; i < n_; ++i) y(static_cast<Eigen::Index>(i), 0) = target[i];
        Eigen::MatrixXd fitted = design_ * solve_truncated(std::move(y));
        FitResult r;
        r.fitted.assign(fitted.data(), fitted.data() + fitted.size());
        r.diag = diag_;
        return r;
    }

    // Shared-factorization projection of several targets (used for the
    // Malliavin trace family, where one conditioning time serves many
    // evaluation times).
    std::vector<std::vector<double>> fit_many(const std::vector<std::span<const double>>& targets) const {
        Eigen::MatrixXd y(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(targets.size()));
        for (std::size_t j = 0; j < targets.size(); ++j) {
            if (targets[j].size() != n_) throw std::invalid_argument("fit_many: target size mismatch");
            for (std::size_t i = 0; i < n_; ++i)
                y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = targets[j][i];
        }
        Eigen::MatrixXd fitted = design_ * solve_truncated(std::move(y));
        std::vector<std::vector<double>> out(targets.size());
        for (std::size_t j = 0; j < targets.size(); ++j) {
            out[j].resize(n_);
            for (std::size_t i = 0; i < n_; ++i)
                out[j][i] = fitted(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
        return out;
    }

    const RegressionDiagnostics& diagnostics() const { return diag_; }

private:
    // Eigen's ColPivHouseholderQR::solve keeps every pivot above machine
    // epsilon no matter what threshold is prescribed, which turns a nearly
    // collinear design into catastrophic coefficient cancellation.  Solve with
    // the leading rank() pivots only; the remaining coefficients stay zero.
    Eigen::MatrixXd solve_truncated(Eigen::MatrixXd y) const {
        const Eigen::Index r = static_cast<Eigen::Index>(diag_.effective_rank);
        Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(design_.cols(), y.cols());
        if (r == 0) return coef;
        y.applyOnTheLeft(qr_.householderQ().setLength(r).adjoint());
        qr_.matrixQR()
            .topLeftCorner(r, r)
            .triangularView<Eigen::Upper>()
            .solveInPlace(y.topRows(r));
        for (Eigen::Index i = 0; i < r; ++i)
            coef.row(qr_.colsPermutation().indices()(i)) = y.row(i);
        return coef;
    }

    static std::vector<std::vector<std::size_t>> multi_indices(std::size_t n_vars, int degree) {
        std::vector<std::vector<std::size_t>> out;
        std::vector<std::size_t> cur(n_vars, 0);
        // enumerate all exponent vectors with total degree <= degree
        struct Rec {
            std::size_t n_vars;
            int degree;
            std::vector<std::vector<std::size_t>>& out;
            void walk(std::vector<std::size_t>& cur, std::size_t pos, int remaining) {
                if (pos == n_vars) {
                    out.push_back(cur);
                    return;
                }
                for (int e = 0; e <= remaining; ++e) {
                    cur[pos] = static_cast<std::size_t>(e);
                    walk(cur, pos + 1, remaining - e);
                }
                cur[pos] = 0;
            }
        } rec{n_vars, degree, out};
        rec.walk(cur, 0, degree);
        return out;
    }

    void fill_monomial(const std::vector<std::vector<double>>& zs,
                       const std::vector<std::size_t>& mi, const std::span<const double>* aug,
                       double aug_scale, std::size_t col) {
        for (std::size_t i = 0; i < n_; ++i) {
            double v = 1.0;
            for (std::size_t j = 0; j < mi.size(); ++j)
                for (std::size_t e = 0; e < mi[j]; ++e) v *= zs[j][i];
            if (aug != nullptr) v *= (*aug)[i] / aug_scale;
            design_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)) = v;
        }
    }

    std::size_t n_ = 0;
    Eigen::MatrixXd design_;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
    RegressionDiagnostics diag_;
};

} // namespace ivol

#endif
