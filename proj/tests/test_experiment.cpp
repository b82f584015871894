#include <cpls/experiment.hpp>

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cpls;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("cpls_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json small_simulation()
{
    return json::parse(R"({
      "command": "simulate",
      "seed": 21,
      "problem": {"generator": "orthonormal", "n": 16, "p": 16, "sigma": 1.0, "sparsity": 2, "magnitude": 4.0},
      "penalty": {"kind": "l1", "lambda": "recommended"},
      "mc": {"replications": 300, "t_grid": [0.5, 1.0], "delta_grid": [0.5, 0.1, 0.01]}
    })");
}

fs::path write_config(const json& j, const std::string& name)
{
    const fs::path p = scratch(name + ".json");
    std::ofstream(p) << j.dump(2);
    return p;
}

} // namespace

TEST_CASE("inline problem solve reproduces the closed form")
{
    const fs::path out = scratch("inline");
    std::ostringstream err;
    REQUIRE(run(std::string(CPLS_TEST_DATA) + "/inline_problem.json", out.string(), std::nullopt, err) == 0);
    const json sol = json::parse(slurp(out / "solution.json"));
    CHECK(sol["beta_hat"][0].get<double>() == Catch::Approx(2.0).margin(1e-6));
    CHECK(std::abs(sol["beta_hat"][1].get<double>()) <= 1e-6);
    CHECK(fs::exists(out / "manifest.json"));
}

TEST_CASE("validation errors name the field and exit with 2")
{
    json j = small_simulation();
    j["problem"].erase("sigma");
    CHECK_THROWS_WITH(parse_experiment(j), Catch::Matchers::ContainsSubstring("problem.sigma"));
    std::ostringstream err;
    CHECK(run(write_config(j, "nosigma").string(), scratch("nosigma_out").string(), std::nullopt, err) == 2);
    CHECK(err.str().find("problem.sigma") != std::string::npos);

    json k = small_simulation();
    k["penalty"]["lambda"] = "large";
    CHECK_THROWS_WITH(parse_experiment(k), Catch::Matchers::ContainsSubstring("penalty.lambda"));
    k = small_simulation();
    k["mc"]["replications"] = 10;
    CHECK_THROWS_AS(parse_experiment(k), ValidationError);
    std::ostringstream err2;
    CHECK(run("/nonexistent/config.json", std::nullopt, std::nullopt, err2) == 2);
}

TEST_CASE("simulate writes deterministic CSVs and a manifest")
{
    const json j = small_simulation();
    const fs::path a = scratch("sim_a"), b = scratch("sim_b");
    REQUIRE(run_experiment(parse_experiment(j, std::nullopt, a.string())).code == ExitCode::ok);
    REQUIRE(run_experiment(parse_experiment(j, std::nullopt, b.string())).code == ExitCode::ok);
    for (const char* f : {"errors.csv", "tails.csv", "tails_mean.csv", "coverage.csv", "events.csv"})
        CHECK(slurp(a / f) == slurp(b / f));

    const std::string cov = slurp(a / "coverage.csv");
    CHECK(cov.rfind("delta,bound,violations,pass\n0.5,", 0) == 0);
    CHECK(cov.find("\n0.10000000000000001,") < cov.find("\n0.01,"));

    const json m = json::parse(slurp(a / "manifest.json"));
    for (const char* f : {"config_hash", "version", "seeds", "wall_time_seconds", "exit_code"}) CHECK(m.contains(f));
    CHECK(m["seeds"]["base_seed"].get<std::uint64_t>() == 21);
}

TEST_CASE("manifest hash tracks config content")
{
    const json j = small_simulation();
    const auto h = [](const json& doc, std::optional<std::uint64_t> seed = std::nullopt) {
        return fnv1a(parse_experiment(doc, seed, "out").raw.dump());
    };
    const json same = json::parse(j.dump(4));
    CHECK(h(j) == h(same));
    CHECK(h(j) != h(j, 22));
    json changed = j;
    changed["mc"]["replications"] = 301;
    CHECK(h(j) != h(changed));
}

TEST_CASE("empty tail grid gives a header-only tails.csv")
{
    json j = small_simulation();
    j["mc"]["t_grid"] = json::array();
    const fs::path out = scratch("empty_grid");
    REQUIRE(run_experiment(parse_experiment(j, std::nullopt, out.string())).code == ExitCode::ok);
    CHECK(slurp(out / "tails.csv") == "t,empirical,bound,slack,pass\n");
}

TEST_CASE("report recomputes from a saved errors.csv")
{
    json j = small_simulation();
    const fs::path sim = scratch("report_src"), rep = scratch("report_dst");
    REQUIRE(run_experiment(parse_experiment(j, std::nullopt, sim.string())).code == ExitCode::ok);
    j["command"] = "report";
    j["report"] = {{"input", sim.string()}};
    REQUIRE(run_experiment(parse_experiment(j, std::nullopt, rep.string())).code == ExitCode::ok);
    CHECK(slurp(sim / "tails.csv") == slurp(rep / "tails.csv"));
    CHECK(slurp(sim / "coverage.csv") == slurp(rep / "coverage.csv"));
}

TEST_CASE("seed override changes the draws")
{
    const json j = small_simulation();
    const fs::path a = scratch("seed_a"), b = scratch("seed_b");
    run_experiment(parse_experiment(j, std::nullopt, a.string()));
    run_experiment(parse_experiment(j, 99, b.string()));
    CHECK(slurp(a / "errors.csv") != slurp(b / "errors.csv"));
}

TEST_CASE("failed checks exit with 1")
{
    std::ostringstream err;
    CHECK(run(std::string(CPLS_TEST_DATA) + "/solve_truncated.json", scratch("trunc").string(), std::nullopt, err) == 1);
}

TEST_CASE("verify-geometry and constants commands")
{
    json g = json::parse(R"({
      "command": "verify-geometry",
      "seed": 3,
      "problem": {"generator": "gaussian", "n": 20, "p": 30, "sigma": 1.0, "sparsity": 2, "magnitude": 2.0},
      "penalty": {"kind": "group", "group_size": 3, "lambda": "recommended"},
      "geometry": {"instances": 3, "pairs": 20, "samples": 100}
    })");
    const fs::path go = scratch("geom");
    CHECK(run_experiment(parse_experiment(g, std::nullopt, go.string())).code == ExitCode::ok);
    const std::string csv = slurp(go / "geometry.csv");
    CHECK(csv.find("projection_identity,3,") != std::string::npos);
    CHECK(csv.find("firm_nonexpansiveness,20,") != std::string::npos);

    json c = json::parse(R"({
      "command": "constants",
      "problem": {"generator": "orthonormal", "n": 8, "p": 8, "sigma": 1.0},
      "constants": {"budget": 8, "specs": [{"kind": "RE", "support": [0, 1]}, {"kind": "WRE", "s": 2}]}
    })");
    const fs::path co = scratch("const");
    CHECK(run_experiment(parse_experiment(c, std::nullopt, co.string())).code == ExitCode::ok);
    CHECK(slurp(co / "constants.csv") == "kind,S,c0,value,status,starts\nRE,0 1,3,1,exact,0\nWRE,0 1,3,1,exact,0\n");
}
