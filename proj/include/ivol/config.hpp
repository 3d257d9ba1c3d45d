#ifndef IVOL_CONFIG_HPP
#define IVOL_CONFIG_HPP

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ivol/chaos.hpp"
#include "ivol/donsker.hpp"
#include "ivol/grid.hpp"
#include "ivol/levy.hpp"
#include "ivol/portfolio.hpp"
#include "ivol/regression.hpp"

namespace ivol {

// Experiment configuration: a strict JSON schema with named function presets
// instead of arbitrary expressions, so a config file pins a run completely.
// Every block is optional and falls back to the defaults below; unknown or
// ill-typed keys fail with the offending key path in the message.

struct FunctionPreset {
    std::string preset;
    double value = 0.0;
    double slope = 0.0; // affine presets
    double rate = 0.0;  // exponential presets
};

struct GridConfig {
    double T = 0.5;
    double T0 = 1.0;
    std::size_t N = 32;
};

struct UtilityConfig {
    std::string name = "log";
    double delta = 0.5; // power utility only
};

struct MarketConfig {
    FunctionPreset b0{"constant", 0.1, 0.0, 0.0};
    FunctionPreset sigma0{"constant", 0.25, 0.0, 0.0};
    double x0 = 1.0;
    UtilityConfig utility;
};

struct MonteCarloConfig {
    std::size_t n_scenarios = 4000;
    std::uint64_t seed = 1;
};

struct ZGridConfig {
    double window = 4.0; // half-width in units of the signal's standard deviation
    std::size_t nodes = 17;
};

namespace detail {

// Two-argument market kernels from a named preset; the conditioning level is
// accepted and ignored so presets stay deterministic functions of (t, s).
inline std::function<double(double, double, double)> preset_kernel(const FunctionPreset& p) {
    if (p.preset == "constant")
        return [p](double, double, double) { return p.value; };
    if (p.preset == "affine_diff")
        return [p](double t, double s, double) { return p.value + p.slope * (t - s); };
    // exp_diff
    return [p](double t, double s, double) { return p.value * std::exp(-p.rate * (t - s)); };
}

} // namespace detail

struct ExperimentConfig {
    std::string name = "experiment";
    GridConfig grid;
    LevyModel levy;
    FunctionPreset beta{"constant", 1.0, 0.0, 0.0};
    FunctionPreset psi{"zero", 0.0, 0.0, 0.0};
    MarketConfig market;
    MonteCarloConfig monte_carlo;
    ZGridConfig z_grid;
    QuadratureSpec quadrature;
    RegressionSpec regression;
    std::map<std::string, double> tolerances;

    TimeGrid make_grid() const { return build_grid(grid.T, grid.N, grid.T0); }

    ChaosSpec make_chaos() const {
        ChaosSpec spec;
        const FunctionPreset b = beta;
        if (b.preset == "constant") {
            spec.beta = [b](double) { return b.value; };
        } else { // affine
            spec.beta = [b](double t) { return b.value + b.slope * t; };
        }
        const FunctionPreset p = psi;
        if (p.preset == "constant") {
            spec.psi = [p](double, double) { return p.value; };
        } else if (p.preset == "scaled_mark") {
            spec.psi = [p](double, double zeta) { return p.value * zeta; };
        } // zero: leave empty
        spec.horizon = grid.T0;
        return spec;
    }

    MarketSpec make_market() const {
        MarketSpec m;
        m.b0 = detail::preset_kernel(market.b0);
        m.sigma0 = detail::preset_kernel(market.sigma0);
        m.x0 = market.x0;
        return m;
    }

    Utility make_utility() const {
        if (market.utility.name == "log") return log_utility();
        return power_utility(market.utility.delta);
    }

    // Evenly spaced conditioning levels over the central window, scaled by the
    // signal's unconditional standard deviation.
    std::vector<double> z_nodes(double sigma_z) const {
        const double half = z_grid.window * sigma_z;
        std::vector<double> nodes(z_grid.nodes);
        if (z_grid.nodes == 1) {
            nodes[0] = 0.0;
            return nodes;
        }
        const double step = 2.0 * half / static_cast<double>(z_grid.nodes - 1);
        for (std::size_t i = 0; i < z_grid.nodes; ++i)
            nodes[i] = -half + step * static_cast<double>(i);
        return nodes;
    }

    double tolerance(const std::string& key, double fallback) const {
        const auto it = tolerances.find(key);
        return it == tolerances.end() ? fallback : it->second;
    }
};

namespace detail {

using nlohmann::json;

[[noreturn]] inline void config_fail(const std::string& path, const std::string& message) {
    throw std::invalid_argument("config: " + path + ": " + message);
}

inline void require_object(const json& j, const std::string& path) {
    if (!j.is_object()) config_fail(path, "expected an object");
}

inline void reject_unknown(const json& j, const std::string& path,
                           std::initializer_list<const char*> allowed) {
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* key : allowed)
            if (item.key() == key) {
                known = true;
                break;
            }
        if (!known) config_fail(path + "." + item.key(), "unknown key");
    }
}

inline double number_at(const json& j, const std::string& path, const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number()) config_fail(path + "." + key, "expected a number");
    return v.get<double>();
}

inline std::size_t count_at(const json& j, const std::string& path, const char* key,
                            std::size_t fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
        return static_cast<std::size_t>(v.get<std::int64_t>());
    config_fail(path + "." + key, "expected a non-negative integer");
}

inline std::string string_at(const json& j, const std::string& path, const char* key,
                             const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_string()) config_fail(path + "." + key, "expected a string");
    return v.get<std::string>();
}

inline FunctionPreset parse_preset(const json& j, const std::string& path,
                                   std::initializer_list<const char*> kinds,
                                   const FunctionPreset& fallback) {
    if (j.is_null()) return fallback;
    require_object(j, path);
    reject_unknown(j, path, {"preset", "value", "slope", "rate"});
    FunctionPreset out = fallback;
    out.preset = string_at(j, path, "preset", fallback.preset);
    bool known = false;
    std::string menu;
    for (const char* kind : kinds) {
        if (out.preset == kind) known = true;
        if (!menu.empty()) menu += "|";
        menu += kind;
    }
    if (!known) config_fail(path + ".preset", "\"" + out.preset + "\" is not one of " + menu);
    out.value = number_at(j, path, "value", fallback.value);
    out.slope = number_at(j, path, "slope", fallback.slope);
    out.rate = number_at(j, path, "rate", fallback.rate);
    if (!std::isfinite(out.value) || !std::isfinite(out.slope) || !std::isfinite(out.rate))
        config_fail(path, "preset parameters must be finite");
    return out;
}

} // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& root) {
    using detail::config_fail;
    detail::require_object(root, "(root)");
    detail::reject_unknown(root, "(root)",
                           {"name", "grid", "levy", "chaos", "market", "monte_carlo", "z_grid",
                            "quadrature", "regression", "tolerances"});
    ExperimentConfig cfg;
    cfg.name = detail::string_at(root, "(root)", "name", cfg.name);
    if (cfg.name.empty() || cfg.name.find('/') != std::string::npos)
        config_fail("name", "must be a non-empty name without '/'");

    if (root.contains("grid")) {
        const auto& j = root.at("grid");
        detail::require_object(j, "grid");
        detail::reject_unknown(j, "grid", {"T", "T0", "N"});
        cfg.grid.T = detail::number_at(j, "grid", "T", cfg.grid.T);
        cfg.grid.T0 = detail::number_at(j, "grid", "T0", cfg.grid.T0);
        cfg.grid.N = detail::count_at(j, "grid", "N", cfg.grid.N);
        if (!(cfg.grid.T > 0.0)) config_fail("grid.T", "must be positive");
        if (!(cfg.grid.T0 >= cfg.grid.T)) config_fail("grid.T0", "must not precede grid.T");
        if (cfg.grid.N == 0) config_fail("grid.N", "must be positive");
    }

    if (root.contains("levy")) {
        const auto& j = root.at("levy");
        detail::require_object(j, "levy");
        detail::reject_unknown(j, "levy", {"intensity", "marks"});
        cfg.levy.intensity = detail::number_at(j, "levy", "intensity", 0.0);
        if (j.contains("marks")) {
            const auto& marks = j.at("marks");
            if (!marks.is_array()) config_fail("levy.marks", "expected an array");
            for (std::size_t i = 0; i < marks.size(); ++i) {
                const std::string path = "levy.marks[" + std::to_string(i) + "]";
                detail::require_object(marks[i], path);
                detail::reject_unknown(marks[i], path, {"zeta", "prob"});
                MarkAtom atom;
                atom.zeta = detail::number_at(marks[i], path, "zeta", 0.0);
                atom.prob = detail::number_at(marks[i], path, "prob", 0.0);
                cfg.levy.marks.push_back(atom);
            }
        }
        try {
            cfg.levy.validate();
        } catch (const std::invalid_argument& e) {
            config_fail("levy", e.what());
        }
    }

    if (root.contains("chaos")) {
        const auto& j = root.at("chaos");
        detail::require_object(j, "chaos");
        detail::reject_unknown(j, "chaos", {"beta", "psi"});
        cfg.beta = detail::parse_preset(j.contains("beta") ? j.at("beta") : nlohmann::json(),
                                        "chaos.beta", {"constant", "affine"}, cfg.beta);
        cfg.psi = detail::parse_preset(j.contains("psi") ? j.at("psi") : nlohmann::json(),
                                       "chaos.psi", {"zero", "constant", "scaled_mark"}, cfg.psi);
    }
    if (cfg.beta.value == 0.0 && (cfg.beta.preset == "constant" || cfg.beta.slope == 0.0))
        config_fail("chaos.beta", "must not vanish identically");

    if (root.contains("market")) {
        const auto& j = root.at("market");
        detail::require_object(j, "market");
        detail::reject_unknown(j, "market", {"b0", "sigma0", "x0", "utility"});
        cfg.market.b0 =
            detail::parse_preset(j.contains("b0") ? j.at("b0") : nlohmann::json(), "market.b0",
                                 {"constant", "affine_diff", "exp_diff"}, cfg.market.b0);
        cfg.market.sigma0 =
            detail::parse_preset(j.contains("sigma0") ? j.at("sigma0") : nlohmann::json(),
                                 "market.sigma0", {"constant", "affine_diff", "exp_diff"},
                                 cfg.market.sigma0);
        cfg.market.x0 = detail::number_at(j, "market", "x0", cfg.market.x0);
        if (!(cfg.market.x0 > 0.0)) config_fail("market.x0", "must be positive");
        if (j.contains("utility")) {
            const auto& u = j.at("utility");
            detail::require_object(u, "market.utility");
            detail::reject_unknown(u, "market.utility", {"name", "delta"});
            cfg.market.utility.name =
                detail::string_at(u, "market.utility", "name", cfg.market.utility.name);
            cfg.market.utility.delta =
                detail::number_at(u, "market.utility", "delta", cfg.market.utility.delta);
            if (cfg.market.utility.name != "log" && cfg.market.utility.name != "power")
                config_fail("market.utility.name",
                            "\"" + cfg.market.utility.name + "\" is not one of log|power");
            if (cfg.market.utility.name == "power") {
                const double d = cfg.market.utility.delta;
                if (!(d < 1.0) || d == 0.0)
                    config_fail("market.utility.delta", "must be below 1 and nonzero");
            }
        }
    }

    if (root.contains("monte_carlo")) {
        const auto& j = root.at("monte_carlo");
        detail::require_object(j, "monte_carlo");
        detail::reject_unknown(j, "monte_carlo", {"n_scenarios", "seed"});
        cfg.monte_carlo.n_scenarios =
            detail::count_at(j, "monte_carlo", "n_scenarios", cfg.monte_carlo.n_scenarios);
        if (cfg.monte_carlo.n_scenarios < 4)
            config_fail("monte_carlo.n_scenarios", "must be at least 4");
        if (j.contains("seed")) {
            const auto& v = j.at("seed");
            if (v.is_number_unsigned())
                cfg.monte_carlo.seed = v.get<std::uint64_t>();
            else if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
                cfg.monte_carlo.seed = static_cast<std::uint64_t>(v.get<std::int64_t>());
            else
                config_fail("monte_carlo.seed", "expected a non-negative integer");
        }
    }

    if (root.contains("z_grid")) {
        const auto& j = root.at("z_grid");
        detail::require_object(j, "z_grid");
        detail::reject_unknown(j, "z_grid", {"window", "nodes"});
        cfg.z_grid.window = detail::number_at(j, "z_grid", "window", cfg.z_grid.window);
        cfg.z_grid.nodes = detail::count_at(j, "z_grid", "nodes", cfg.z_grid.nodes);
        if (!(cfg.z_grid.window > 0.0)) config_fail("z_grid.window", "must be positive");
        if (cfg.z_grid.nodes == 0) config_fail("z_grid.nodes", "must be positive");
    }

    if (root.contains("quadrature")) {
        const auto& j = root.at("quadrature");
        detail::require_object(j, "quadrature");
        detail::reject_unknown(j, "quadrature", {"n_nodes", "x_cutoff"});
        cfg.quadrature.n_nodes =
            detail::count_at(j, "quadrature", "n_nodes", cfg.quadrature.n_nodes);
        cfg.quadrature.x_cutoff =
            detail::number_at(j, "quadrature", "x_cutoff", cfg.quadrature.x_cutoff);
        try {
            cfg.quadrature.validate();
        } catch (const std::invalid_argument& e) {
            config_fail("quadrature", e.what());
        }
    }

    if (root.contains("regression")) {
        const auto& j = root.at("regression");
        detail::require_object(j, "regression");
        detail::reject_unknown(j, "regression", {"degree", "aug_degree"});
        cfg.regression.degree =
            static_cast<int>(detail::count_at(j, "regression", "degree",
                                              static_cast<std::size_t>(cfg.regression.degree)));
        cfg.regression.aug_degree = static_cast<int>(detail::count_at(
            j, "regression", "aug_degree", static_cast<std::size_t>(cfg.regression.aug_degree)));
    }

    if (root.contains("tolerances")) {
        const auto& j = root.at("tolerances");
        detail::require_object(j, "tolerances");
        for (const auto& item : j.items()) {
            if (!item.value().is_number())
                detail::config_fail("tolerances." + item.key(), "expected a number");
            cfg.tolerances[item.key()] = item.value().get<double>();
            if (!(cfg.tolerances[item.key()] > 0.0))
                detail::config_fail("tolerances." + item.key(), "must be positive");
        }
    }

    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(root);
}

namespace detail {

inline json preset_echo(const FunctionPreset& p) {
    json j{{"preset", p.preset}};
    if (p.preset != "zero") j["value"] = p.value;
    if (p.preset == "affine" || p.preset == "affine_diff") j["slope"] = p.slope;
    if (p.preset == "exp_diff") j["rate"] = p.rate;
    return j;
}

} // namespace detail

// Fully resolved view of the configuration, defaults filled in.  Object keys
// serialize in sorted order, so the dump is canonical and hashable.
inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
    nlohmann::json marks = nlohmann::json::array();
    for (const auto& m : cfg.levy.marks) marks.push_back({{"prob", m.prob}, {"zeta", m.zeta}});
    nlohmann::json echo{
        {"name", cfg.name},
        {"grid", {{"T", cfg.grid.T}, {"T0", cfg.grid.T0}, {"N", cfg.grid.N}}},
        {"levy", {{"intensity", cfg.levy.intensity}, {"marks", marks}}},
        {"chaos",
         {{"beta", detail::preset_echo(cfg.beta)}, {"psi", detail::preset_echo(cfg.psi)}}},
        {"market",
         {{"b0", detail::preset_echo(cfg.market.b0)},
          {"sigma0", detail::preset_echo(cfg.market.sigma0)},
          {"x0", cfg.market.x0},
          {"utility",
           cfg.market.utility.name == "power"
               ? nlohmann::json{{"name", "power"}, {"delta", cfg.market.utility.delta}}
               : nlohmann::json{{"name", "log"}}}}},
        {"monte_carlo",
         {{"n_scenarios", cfg.monte_carlo.n_scenarios}, {"seed", cfg.monte_carlo.seed}}},
        {"z_grid", {{"window", cfg.z_grid.window}, {"nodes", cfg.z_grid.nodes}}},
        {"quadrature",
         {{"n_nodes", cfg.quadrature.n_nodes}, {"x_cutoff", cfg.quadrature.x_cutoff}}},
        {"regression",
         {{"degree", cfg.regression.degree}, {"aug_degree", cfg.regression.aug_degree}}},
        {"tolerances", cfg.tolerances}};
    return echo;
}

inline std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 1469598103934665603ull;
    for (const unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash_hex(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << std::hex << fnv1a(config_echo(cfg).dump());
    return out.str();
}

} // namespace ivol

#endif
