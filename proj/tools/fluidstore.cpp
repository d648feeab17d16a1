// Command-line entry point; see `fluidstore --help`.
#include <CLI11.hpp>

#include "fluidstore/cli.hpp"

int main(int argc, char **argv) {
    CLI::App app{"Wind-farm storage sizing with fluid-queue steady-state profit"};
    app.fallthrough();
    app.require_subcommand(1);

    fluidstore::cli::Options opts;
    std::string out_dir;
    std::uint64_t seed = 0;
    int workers = 0;
    app.add_option("--config", opts.config_path, "run configuration (JSON)")->required();
    auto *out_opt = app.add_option("--out", out_dir, "output directory (overrides output_dir)");
    auto *seed_opt = app.add_option("--seed", seed, "random seed (overrides seed)");
    auto *workers_opt =
        app.add_option("--workers", workers, "worker threads (overrides workers)")->check(CLI::PositiveNumber);
    app.add_flag("--diagnostics", opts.diagnostics, "write per-solve diagnostics.csv");

    const std::pair<const char *, const char *> commands[] = {
        {"estimate", "fit the wind CTMC from the trace and write model.json"},
        {"curve", "value-of-storage curve over curve.b_values and the critical cost"},
        {"optimize", "optimal contract quantity and storage size"},
        {"sweep", "sensitivity sweep over sweep.axis"},
        {"simulate", "trace-driven ex-post surface over the simulate grid"},
        {"validate", "compare spectral results against Monte Carlo and ex-post oracles"},
    };
    for (const auto &[name, help] : commands)
        app.add_subcommand(name, help)->callback([&opts, name = std::string(name)] { opts.command = name; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : fluidstore::cli::kConfig;
    }
    if (*out_opt)
        opts.out_dir = out_dir;
    if (*seed_opt)
        opts.seed = seed;
    if (*workers_opt)
        opts.workers = workers;
    return fluidstore::cli::run(opts);
}
