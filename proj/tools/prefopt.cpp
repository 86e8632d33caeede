#include <iostream>

#include <CLI11.hpp>

#include "prefopt/commands.hpp"

int main(int argc, char** argv) {
    using namespace prefopt;
    CLI::App app{"prefopt: preference-optimization lab on toy sequence models"};
    app.require_subcommand(1);

    CliOptions opts;
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    app.add_option("--config", config, "experiment config (TOML)");
    app.add_option("--out", out, "output directory (default $PREFOPT_OUT_DIR/<config stem>)");
    auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
    app.add_option("--jobs", opts.jobs, "concurrent runs (sweep only)")->check(CLI::PositiveNumber);
    app.add_flag("--quiet", opts.quiet, "suppress progress output");
    app.fallthrough();

    auto* gen = app.add_subcommand("gen", "generate a preference dataset");
    auto* train = app.add_subcommand("train", "train a policy and write its trajectory");
    auto* sweep = app.add_subcommand("sweep", "train every point of the config's sweep grid");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
    gradcheck->add_option("--instances", opts.instances, "random instances per objective/backend")
        ->check(CLI::PositiveNumber);
    gradcheck->add_flag("--inject-sign-flip", opts.inject_sign_flip, "negate analytic gradients")
        ->group("");
    auto* micheck = app.add_subcommand("micheck", "train critics and compare bounds with exact CMI");
    auto* report = app.add_subcommand("report", "merge run trajectories into plot data");
    std::vector<std::string> dirs;
    report->add_option("runs", dirs, "run directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_code::config;
    }
    if (!config.empty()) opts.config = config;
    if (!out.empty()) opts.out = out;
    if (seed_opt->count() > 0) opts.seed = seed;
    for (const auto& d : dirs) opts.run_dirs.emplace_back(d);

    if (*gen) return cmd_gen(opts, std::cout, std::cerr);
    if (*train) return cmd_train(opts, std::cout, std::cerr);
    if (*sweep) return cmd_sweep(opts, std::cout, std::cerr);
    if (*gradcheck) return cmd_gradcheck(opts, std::cout, std::cerr);
    if (*micheck) return cmd_micheck(opts, std::cout, std::cerr);
    if (*report) return cmd_report(opts, std::cout, std::cerr);
    return exit_code::failure;
}
