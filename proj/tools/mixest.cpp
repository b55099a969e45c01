#include "commands.hpp"

#include <CLI11.hpp>

int main(int argc, char** argv) {
    using namespace mixest::cli;
    CLI::App app{"Mixture-weight estimation from history and market portfolios"};
    app.require_subcommand(1);

    RunOptions opt;
    std::string mode;
    std::uint64_t seed = 0;
    int replications = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON configuration file")->required();
        sub->add_option("--out", opt.out, "output directory")->capture_default_str();
        sub->add_flag("--strict", opt.strict, "exit 1 if any estimator failed");
    };
    auto* simulate = app.add_subcommand("simulate", "Monte Carlo experiment grid");
    add_common(simulate);
    auto* seed_opt = simulate->add_option("--seed", seed, "root random seed (overrides config)");
    auto* reps_opt = simulate->add_option("--replications", replications, "replications per grid row")
                         ->check(CLI::PositiveNumber);

    auto* estimate = app.add_subcommand("estimate", "backward / forward / combined estimates for one observation");
    add_common(estimate);
    auto* mode_opt = estimate->add_option("--mode", mode, "estimator")
                         ->check(CLI::IsMember({"backward", "forward", "combined", "all"}));

    auto* backtest = app.add_subcommand("backtest", "rolling out-of-sample backtest on weekly data");
    add_common(backtest);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    if (*seed_opt) opt.seed = seed;
    if (*reps_opt) opt.replications = replications;
    if (*mode_opt) opt.mode = mode;

    return guarded(
        [&] {
            if (simulate->parsed()) return run_simulate(opt, std::cerr);
            if (estimate->parsed()) return run_estimate(opt, std::cerr);
            return run_backtest_cmd(opt, std::cerr);
        },
        std::cerr);
}
