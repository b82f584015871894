#include <cpls/experiment.hpp>

#include <CLI11.hpp>

int main(int argc, char** argv)
{
    CLI::App app{"Penalized least squares experiments: solve, verify-geometry, constants, simulate, report"};
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config, "experiment config (JSON)")->required();
    app.add_option("--out", out, "output directory (overrides the config)");
    app.add_option("--seed", seed, "base seed (overrides the config)");
    app.set_version_flag("--version", cpls::kVersion);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return cpls::run(config, out, seed);
}
