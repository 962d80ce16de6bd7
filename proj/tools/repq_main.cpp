#include <CLI11.hpp>

#include "repq/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Quantization-aware training for re-parametrized convolution blocks"};
    app.require_subcommand(1);

    std::string run_config, flops_config, sabotage;
    bool verify_json = false;

    auto* run = app.add_subcommand("run", "train FP + QAT stages from a config");
    run->add_option("config", run_config, "experiment config (JSON)")->required();

    auto* verify = app.add_subcommand("verify", "run the invariant suites");
    verify->add_flag("--json", verify_json, "machine-readable report");
    verify->add_option("--sabotage", sabotage, "inject a fault into the named check");

    auto* flops = app.add_subcommand("flops", "multiply counters per training step");
    flops->add_option("config", flops_config, "experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return repq::kExitUsage;
    }

    if (run->parsed()) return repq::cmd_run(run_config);
    if (verify->parsed()) return repq::cmd_verify(verify_json, sabotage);
    if (flops->parsed()) return repq::cmd_flops(flops_config);
    return repq::kExitUsage;
}
