// Command-line front end for the digit-token forecaster: configuration,
// the train -> forecast -> evaluate -> backtest pipeline over the rolling
// window plan, and report emission.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "digitcast/pipeline.hpp"

namespace {

struct GlobalFlags {
    std::string config_path;
    std::string windows_range;
    std::string out_dir;
    std::string levels;
    uint64_t seed = 0;
    bool seed_set = false;
    int jobs = -1;
    bool shuffle_context = false;
};

digitcast::RunConfig load_config(const GlobalFlags& flags) {
    auto cfg = digitcast::load_run_config(flags.config_path);
    if (flags.seed_set) {
        cfg.seed = flags.seed;
        cfg.train.seed = flags.seed;
    }
    if (flags.jobs >= 0) {
        cfg.jobs = flags.jobs;
        cfg.train.jobs = flags.jobs;
    }
    if (!flags.out_dir.empty()) cfg.output_dir = flags.out_dir;
    if (flags.shuffle_context) cfg.sampling.shuffle_context = true;
    if (!flags.levels.empty()) {
        cfg.evaluation.levels.clear();
        std::stringstream ss(flags.levels);
        std::string part;
        while (std::getline(ss, part, ','))
            cfg.evaluation.levels.push_back(std::stod(part));
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"digitcast: stochastic time-series forecasting with a digit-token transformer"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalFlags flags;
    app.add_option("--config", flags.config_path, "Path to the JSON run config")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--seed", flags.seed, "Override the global seed")
        ->each([&](const std::string&) { flags.seed_set = true; });
    app.add_option("--jobs", flags.jobs, "Max worker threads (0 = all cores)");
    app.add_option("--windows", flags.windows_range,
                   "Window subset, e.g. \"0-4\" or \"0,2,7\" (default: all)");
    app.add_option("--out", flags.out_dir, "Override the output directory");
    app.add_option("--levels", flags.levels, "Override quantile levels, e.g. \"0.5,0.75,0.95\"");
    app.add_flag("--shuffle-context", flags.shuffle_context,
                 "Randomly permute each inference context before tokenization");

    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate the configured synthetic dataset as CSV");
    synth->add_option("--out-file", synth_out, "Output CSV path (default: <output_dir>/<name>.csv)");
    auto* train = app.add_subcommand("train", "Train one model per rolling window");
    auto* forecast = app.add_subcommand("forecast", "Simulate forecast ensembles per window");
    auto* evaluate = app.add_subcommand("evaluate", "Compute MAD/RMSE/QL/CRPS with IQM + CIs");
    auto* backtest = app.add_subcommand("backtest", "Kupiec proportion-of-failures backtest");
    auto* report = app.add_subcommand("report", "Re-aggregate persisted metric cells");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        auto cfg = load_config(flags);
        if (synth->parsed()) digitcast::cmd_synth(cfg, synth_out);
        if (train->parsed()) digitcast::cmd_train(cfg, flags.windows_range);
        if (forecast->parsed()) digitcast::cmd_forecast(cfg, flags.windows_range);
        if (evaluate->parsed()) digitcast::cmd_evaluate(cfg);
        if (backtest->parsed()) digitcast::cmd_backtest(cfg);
        if (report->parsed()) digitcast::cmd_report(cfg);
    } catch (const digitcast::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
