// odekkl simulate|train|eval|sweep|genmap --config <path> [--seed N] [--out DIR]
#include <odekkl/cli.hpp>

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char **argv) {
    CLI::App app{"Learn and evaluate KKL and Luenberger-like state observers"};
    app.require_subcommand(1);

    std::string config;
    std::uint64_t seed = 0;
    std::string out = "out";

    for (const std::string &name : odekkl::command_names()) {
        CLI::App *sub = app.add_subcommand(name);
        sub->add_option("--config", config, "experiment config (JSON)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "overrides the config seed");
        sub->add_option("--out", out, "output directory")->capture_default_str();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << odekkl::error_line("usage", "", e.what()) << '\n';
        return odekkl::exit_config;
    }

    const CLI::App *chosen = app.get_subcommands().front();
    odekkl::CommandContext ctx;
    ctx.out_dir = out;
    if (chosen->count("--seed") > 0) {
        ctx.seed_override = seed;
    }
    return odekkl::run_command(chosen->get_name(), config, ctx);
}
