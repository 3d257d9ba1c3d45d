#ifndef IVOL_LEVY_HPP
#define IVOL_LEVY_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ivol/core.hpp"

namespace ivol {

// Compound Poisson driver with finitely many mark values: the jump measure is
// intensity * sum_i prob[i] * delta_{mark[i]}.  intensity == 0 disables jumps.
struct MarkAtom {
    double zeta = 0.0;
    double prob = 0.0;
};

struct LevyModel {
    double intensity = 0.0;
    std::vector<MarkAtom> marks;

    bool has_jumps() const { return intensity > 0.0 && !marks.empty(); }

    void validate() const {
        if (!(intensity >= 0.0) || !std::isfinite(intensity))
            throw std::invalid_argument("LevyModel: intensity must be finite and non-negative");
        if (intensity == 0.0) return;
        if (marks.empty()) throw std::invalid_argument("LevyModel: positive intensity needs marks");
        double total = 0.0;
        for (const auto& m : marks) {
            if (m.zeta == 0.0) throw std::invalid_argument("LevyModel: mark value 0 is not allowed");
            if (!(m.prob >= 0.0)) throw std::invalid_argument("LevyModel: mark probability < 0");
            total += m.prob;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("LevyModel: mark probabilities must sum to 1");
    }

    // integral of f(zeta) against the jump measure (per unit time).
    template <typename F>
    double nu_integral(F&& f) const {
        if (!has_jumps()) return 0.0;
        double acc = 0.0;
        for (const auto& m : marks) acc += m.prob * f(m.zeta);
        return acc * intensity;
    }
};

} // namespace ivol

#endif
