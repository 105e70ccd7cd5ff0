// capsule: command-line front end for the pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "capsule/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using capsule::pipeline::Target;

using Flags = capsule::pipeline::Overrides;

void add_flags(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "Run configuration file (sectioned key = value)");
    sub->add_option("--preset", f.preset, "Hypothesis families: h1, h2, h3, h4 or all (comma list)");
    sub->add_option("--scorer", f.scorer, "Scorer mode")->check(CLI::IsMember({"live", "mock", "cache-only"}));
    sub->add_option("--seed", f.seed, "Seed for synthesis and resampling");
    sub->add_option("--threads", f.threads, "Upper bound on worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", f.out, "Output directory");
    sub->add_flag("--strict", f.strict, "Treat malformed input rows and failed scores as fatal");
    sub->add_option("--set", f.set, "Override any setting: section.key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frozen-checkpoint equity research pipeline"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<Target, const char*>> commands{
        {Target::Ingest, "Load and validate the panel"},
        {Target::Score, "Score every firm for every model"},
        {Target::Metrics, "Build sector-neutral cross-sections"},
        {Target::Regress, "Run the hypothesis regressions"},
        {Target::Portfolio, "Quintile sorts and the optimized backtest"},
        {Target::Probe, "Post-cutoff leakage probe"},
        {Target::Synth, "Write a synthetic dataset"},
        {Target::Report, "Every stage with a full report bundle"},
    };
    std::optional<Target> chosen;
    for (const auto& [t, help] : commands) {
        auto* sub = app.add_subcommand(std::string(capsule::pipeline::to_string(t)), help);
        add_flags(sub, flags);
        sub->callback([&chosen, t = t] { chosen = t; });
    }
    auto* run = app.add_subcommand("run", "Alias of report; stages follow --preset");
    add_flags(run, flags);
    run->callback([&chosen] { chosen = Target::Report; });

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = capsule::pipeline::build_config(flags);
        capsule::pipeline::Pipeline p(cfg);
        auto bundle = p.run(*chosen);
        std::cout << "wrote " << bundle.report.tables.size() << " tables to " << (p.config().out / "tables").string()
                  << "\n";
        return 0;
    } catch (const capsule::Error& e) {
        std::cerr << "error: " << capsule::to_string(e.code()) << ": " << e.detail() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
