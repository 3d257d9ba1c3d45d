#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include "ivol/acceptance.hpp"
#include "ivol/config.hpp"

using namespace ivol;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() /
                           ("ivol-cli-" + std::to_string(static_cast<long>(getpid())));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

fs::path write_config(const std::string& name, const nlohmann::json& doc) {
    const fs::path p = scratch_dir() / name;
    std::ofstream out(p);
    out << doc.dump(2) << "\n";
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(IVOL_CLI_PATH) + " " + args + " > " +
                            (scratch_dir() / "cli_stdout.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

nlohmann::json small_gaussian(const std::string& name) {
    return {{"name", name},
            {"grid", {{"T", 0.5}, {"T0", 1.0}, {"N", 8}}},
            {"monte_carlo", {{"n_scenarios", 200}, {"seed", 7}}},
            {"z_grid", {{"window", 2.0}, {"nodes", 5}}}};
}

} // namespace

TEST_CASE("an empty config resolves to the documented defaults") {
    const ExperimentConfig cfg = parse_config(nlohmann::json::object());
    CHECK(cfg.name == "experiment");
    CHECK(cfg.grid.T == 0.5);
    CHECK(cfg.grid.T0 == 1.0);
    CHECK(cfg.grid.N == 32);
    CHECK(cfg.monte_carlo.n_scenarios == 4000);
    CHECK(cfg.monte_carlo.seed == 1);
    CHECK(cfg.beta.preset == "constant");
    CHECK(cfg.beta.value == 1.0);
    CHECK(cfg.psi.preset == "zero");
    CHECK(cfg.market.utility.name == "log");
    CHECK(cfg.market.x0 == 1.0);
    CHECK(!cfg.levy.has_jumps());
    CHECK(cfg.tolerance("anything", 2.5) == 2.5);
}

TEST_CASE("config errors carry the offending key path") {
    using Catch::Matchers::ContainsSubstring;
    CHECK_THROWS_WITH(parse_config({{"grid", {{"dt", 0.1}}}}), ContainsSubstring("grid.dt"));
    CHECK_THROWS_WITH(parse_config({{"name", 3}}), ContainsSubstring("name"));
    CHECK_THROWS_WITH(parse_config({{"chaos", {{"beta", {{"preset", "quadratic"}}}}}}),
                      ContainsSubstring("is not one of"));
    CHECK_THROWS_WITH(parse_config({{"market", {{"x0", -1.0}}}}),
                      ContainsSubstring("market.x0"));
    CHECK_THROWS_WITH(parse_config({{"monte_carlo", {{"n_scenarios", 2}}}}),
                      ContainsSubstring("at least 4"));
    CHECK_THROWS_WITH(parse_config({{"monte_carlo", {{"seed", -1}}}}),
                      ContainsSubstring("monte_carlo.seed"));
    CHECK_THROWS_WITH(parse_config({{"tolerances", {{"foc", -1.0}}}}),
                      ContainsSubstring("must be positive"));
    CHECK_THROWS_WITH(
        parse_config({{"chaos", {{"beta", {{"preset", "constant"}, {"value", 0.0}}}}}}),
        ContainsSubstring("vanish"));
    CHECK_THROWS_WITH(parse_config({{"market", {{"utility", {{"name", "exp"}}}}}}),
                      ContainsSubstring("log|power"));
    CHECK_THROWS_WITH(
        parse_config({{"market", {{"utility", {{"name", "power"}, {"delta", 1.5}}}}}}),
        ContainsSubstring("market.utility.delta"));
    CHECK_THROWS_AS(parse_config(nlohmann::json::array()), std::invalid_argument);
}

TEST_CASE("named presets build the advertised kernels") {
    nlohmann::json doc{
        {"chaos",
         {{"beta", {{"preset", "affine"}, {"value", 1.0}, {"slope", 0.5}}},
          {"psi", {{"preset", "scaled_mark"}, {"value", 0.5}}}}},
        {"market",
         {{"b0", {{"preset", "affine_diff"}, {"value", 0.1}, {"slope", 0.2}}},
          {"sigma0", {{"preset", "exp_diff"}, {"value", 0.3}, {"rate", 2.0}}}}},
        {"levy", {{"intensity", 1.0}, {"marks", {{{"zeta", 1.0}, {"prob", 1.0}}}}}}};
    const ExperimentConfig cfg = parse_config(doc);

    const ChaosSpec spec = cfg.make_chaos();
    CHECK(spec.beta(0.4) == Catch::Approx(1.2));
    CHECK(spec.psi(0.0, 2.0) == Catch::Approx(1.0));
    CHECK(spec.horizon == cfg.grid.T0);

    const MarketSpec m = cfg.make_market();
    CHECK(m.b0(1.0, 0.5, 9.9) == Catch::Approx(0.1 + 0.2 * 0.5));
    CHECK(m.sigma0(1.0, 1.0, 0.0) == Catch::Approx(0.3));
    CHECK(m.sigma0(1.0, 0.5, 0.0) == Catch::Approx(0.3 * std::exp(-1.0)));
}

TEST_CASE("conditioning grid scales with the signal deviation") {
    ExperimentConfig cfg = parse_config(nlohmann::json::object());
    cfg.z_grid.window = 2.0;
    cfg.z_grid.nodes = 5;
    const std::vector<double> nodes = cfg.z_nodes(1.5);
    REQUIRE(nodes.size() == 5);
    CHECK(nodes.front() == Catch::Approx(-3.0));
    CHECK(nodes[2] == Catch::Approx(0.0));
    CHECK(nodes.back() == Catch::Approx(3.0));

    cfg.z_grid.nodes = 1;
    CHECK(cfg.z_nodes(1.5) == std::vector<double>{0.0});
}

TEST_CASE("config hash is canonical and seed-sensitive") {
    const nlohmann::json doc = small_gaussian("hash-probe");
    const ExperimentConfig a = parse_config(doc);
    const ExperimentConfig b = parse_config(doc);
    CHECK(config_hash_hex(a) == config_hash_hex(b));

    // The fully resolved echo parses back to an identical configuration.
    const ExperimentConfig round = parse_config(config_echo(a));
    CHECK(config_hash_hex(round) == config_hash_hex(a));

    nlohmann::json reseeded = doc;
    reseeded["monte_carlo"]["seed"] = 8;
    CHECK(config_hash_hex(parse_config(reseeded)) != config_hash_hex(a));
}

TEST_CASE("config loading reports unreadable or malformed files") {
    using Catch::Matchers::ContainsSubstring;
    CHECK_THROWS_AS(load_config((scratch_dir() / "missing.json").string()),
                    std::invalid_argument);
    const fs::path bad = scratch_dir() / "bad.json";
    std::ofstream(bad) << "{ not json";
    CHECK_THROWS_WITH(load_config(bad.string()), ContainsSubstring("not valid JSON"));
}

TEST_CASE("donsker pipeline reruns byte-identically and honors seed overrides", "[cli]") {
    const fs::path cfg = write_config("donsker.json", small_gaussian("smoke-donsker"));
    const fs::path out = scratch_dir() / "out-donsker";
    const std::string base = "donsker --config " + cfg.string() + " --out " + out.string();

    REQUIRE(run_cli(base) == 0);
    const fs::path report = out / "smoke-donsker" / "report.json";
    const std::string first = slurp(report);

    const std::string csv = slurp(out / "smoke-donsker" / "fields" / "m_field.csv");
    CHECK(csv.rfind("# config_hash=", 0) == 0);
    CHECK(csv.find("t,z,m_mean,m_s0,m_s1,m_s2,m_s3") != std::string::npos);

    REQUIRE(run_cli(base) == 0);
    CHECK(slurp(report) == first);

    REQUIRE(run_cli(base + " --seed 99") == 0);
    CHECK(slurp(report) != first);

    const nlohmann::json doc = nlohmann::json::parse(first);
    CHECK(doc.at("pipeline") == "donsker");
    CHECK(doc.at("config").at("monte_carlo").at("seed") == 7);
    for (const auto& check : doc.at("checks")) CHECK(check.at("pass") == true);
}

TEST_CASE("simulate and check pipelines succeed on small configs", "[cli]") {
    nlohmann::json sim = small_gaussian("smoke-simulate");
    const fs::path sim_cfg = write_config("simulate.json", sim);
    const fs::path out = scratch_dir() / "out-smoke";
    REQUIRE(run_cli("simulate --config " + sim_cfg.string() + " --out " + out.string()) == 0);
    CHECK(fs::exists(out / "smoke-simulate" / "fields" / "paths.csv"));

    nlohmann::json chk = small_gaussian("smoke-check");
    chk["monte_carlo"]["n_scenarios"] = 2000;
    const fs::path chk_cfg = write_config("check.json", chk);
    REQUIRE(run_cli("check --config " + chk_cfg.string() + " --out " + out.string() +
                    " --threads 2") == 0);
    CHECK(fs::exists(out / "smoke-check" / "fields" / "objective_scan.csv"));
    CHECK(fs::exists(out / "smoke-check" / "fields" / "foc_profile.csv"));
}

TEST_CASE("portfolio pipeline reports growth and stays positive", "[cli]") {
    nlohmann::json doc = small_gaussian("smoke-portfolio");
    doc["monte_carlo"]["n_scenarios"] = 1000;
    doc["z_grid"] = {{"window", 3.0}, {"nodes", 9}};
    const fs::path cfg = write_config("portfolio.json", doc);
    const fs::path out = scratch_dir() / "out-portfolio";
    REQUIRE(run_cli("portfolio --config " + cfg.string() + " --out " + out.string()) == 0);

    const nlohmann::json report =
        nlohmann::json::parse(slurp(out / "smoke-portfolio" / "report.json"));
    CHECK(report.at("summary").at("advantage_expected").get<double>() ==
          Catch::Approx(0.5 * std::log(2.0)));
    CHECK(fs::exists(out / "smoke-portfolio" / "fields" / "policy.csv"));
    CHECK(fs::exists(out / "smoke-portfolio" / "fields" / "wealth.csv"));
}

TEST_CASE("configuration problems exit with code 2", "[cli]") {
    const fs::path out = scratch_dir() / "out-errors";

    const fs::path bad_json = scratch_dir() / "broken.json";
    std::ofstream(bad_json) << "{ nope";
    CHECK(run_cli("donsker --config " + bad_json.string() + " --out " + out.string()) == 2);

    nlohmann::json unknown = small_gaussian("unknown-key");
    unknown["grid"]["dt"] = 0.1;
    const fs::path unknown_cfg = write_config("unknown.json", unknown);
    CHECK(run_cli("donsker --config " + unknown_cfg.string() + " --out " + out.string()) == 2);

    // Volatility preset that vanishes on the lattice diagonal.
    nlohmann::json degenerate = small_gaussian("degenerate-vol");
    degenerate["market"] = {
        {"sigma0", {{"preset", "affine_diff"}, {"value", 0.0}, {"slope", 1.0}}}};
    const fs::path degenerate_cfg = write_config("degenerate.json", degenerate);
    CHECK(run_cli("portfolio --config " + degenerate_cfg.string() + " --out " + out.string()) ==
          2);

    CHECK(run_cli("donsker") == 2);
    CHECK(run_cli("donsker --config " + (scratch_dir() / "missing.json").string()) == 2);
}

TEST_CASE("violated numeric checks exit with code 3", "[cli]") {
    nlohmann::json doc = small_gaussian("impossible-tolerance");
    doc["tolerances"] = {{"normalization", 1e-18}};
    const fs::path cfg = write_config("impossible.json", doc);
    const fs::path out = scratch_dir() / "out-exit3";
    CHECK(run_cli("donsker --config " + cfg.string() + " --out " + out.string()) == 3);
}

TEST_CASE("drift sign flip breaks the insider policy criterion", "[cli]") {
    AcceptanceOptions opt;
    opt.threads = std::min<std::size_t>(std::thread::hardware_concurrency(), 8);
    if (opt.threads == 0) opt.threads = 1;
    opt.flip_theta_sign = true;
    const CriterionResult flipped = acceptance::criterion_insider_policy(opt);
    CHECK_FALSE(flipped.pass);
}
