// Command line front end for the experiment pipelines.  Parses a JSON config,
// dispatches to the requested pipeline, prints one line per check, and maps
// failures to exit codes: 2 for configuration problems, 3 for violated
// numeric checks or invariants.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "ivol/acceptance.hpp"
#include "ivol/config.hpp"
#include "ivol/runner.hpp"

namespace {

void print_report(const ivol::RunReport& rep, const ivol::RunOptions& opt) {
    for (const auto& c : rep.checks)
        std::cout << (c.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << c.detail << "\n";
    const auto report_path = opt.out_dir / rep.name / "report.json";
    std::cout << rep.pipeline << " finished in " << rep.wall_seconds << " s, report at "
              << report_path.string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"insider control of Volterra dynamics: simulation and checking pipelines"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::size_t threads = 1;
    std::uint64_t seed_value = 0;
    bool flip_theta = false;

    const auto add_common = [&](CLI::App* sub, bool wants_config) {
        if (wants_config)
            sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory (default: out)");
        sub->add_option("--seed", seed_value, "override the config seed");
        sub->add_option("--threads", threads, "worker threads for data-parallel stages")
            ->check(CLI::PositiveNumber);
    };

    CLI::App* simulate =
        app.add_subcommand("simulate", "sample the driver and signal paths");
    CLI::App* donsker =
        app.add_subcommand("donsker", "tabulate and verify the conditional density field");
    CLI::App* adjoint =
        app.add_subcommand("adjoint", "backward solver against its density benchmark");
    CLI::App* check =
        app.add_subcommand("check", "optimality conditions on a searchable benchmark");
    CLI::App* portfolio =
        app.add_subcommand("portfolio", "insider portfolio policy and wealth");
    CLI::App* validate =
        app.add_subcommand("validate", "run the pinned acceptance battery");
    for (CLI::App* sub : {simulate, donsker, adjoint, check, portfolio}) add_common(sub, true);
    add_common(validate, false);
    validate->add_flag("--flip-theta-sign", flip_theta,
                       "negate the market drift handed to the solver (fault injection)")
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    ivol::RunOptions opt;
    opt.out_dir = out_dir;
    opt.threads = threads;
    for (const CLI::App* sub : app.get_subcommands())
        if (sub->count("--seed") > 0) opt.seed = seed_value;

    try {
        ivol::RunReport rep;
        if (validate->parsed()) {
            ivol::AcceptanceOptions aopt;
            aopt.threads = threads;
            aopt.flip_theta_sign = flip_theta;
            rep = ivol::run_validate(aopt, opt);
        } else {
            const ivol::ExperimentConfig cfg = ivol::load_config(config_path);
            if (simulate->parsed())
                rep = ivol::run_simulate(cfg, opt);
            else if (donsker->parsed())
                rep = ivol::run_donsker(cfg, opt);
            else if (adjoint->parsed())
                rep = ivol::run_adjoint(cfg, opt);
            else if (check->parsed())
                rep = ivol::run_check(cfg, opt);
            else
                rep = ivol::run_portfolio(cfg, opt);
        }
        print_report(rep, opt);
        return rep.ok() ? 0 : 3;
    } catch (const ivol::numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
