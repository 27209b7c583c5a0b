#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "trajgpt/cli/commands.hpp"
#include "trajgpt/errors.hpp"

int main(int argc, char** argv) {
    using trajgpt::cli::Options;
    CLI::App app{"trajgpt: continuous-time sequence model for health trajectories"};
    app.require_subcommand(1, 1);
    Options opt;
    std::uint64_t seed = 0;
    std::string out, checkpoint, precision, inference, gap_mode;
    std::vector<std::size_t> ks;

    for (const auto& name : trajgpt::cli::kCommands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", opt.config_path, "JSON config file")->required();
        sub->add_option("--seed", seed, "RNG seed");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--checkpoint", checkpoint, "checkpoint file");
        sub->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        sub->add_option("--inference", inference, "auto, time or both")
            ->check(CLI::IsMember({"auto", "time", "both"}));
        sub->add_option("--gap-mode", gap_mode, "history or full")->check(CLI::IsMember({"history", "full"}));
        sub->add_option("--k", ks, "recall cutoffs, e.g. 5,10,15")->delimiter(',');
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    auto* sub = app.get_subcommands().front();
    opt.command = sub->get_name();
    if (sub->count("--seed")) opt.seed = seed;
    if (sub->count("--out")) opt.out = out;
    if (sub->count("--checkpoint")) opt.checkpoint = checkpoint;
    if (sub->count("--precision")) opt.precision = precision;
    if (sub->count("--inference")) opt.inference = inference;
    if (sub->count("--gap-mode")) opt.gap_mode = gap_mode;
    if (sub->count("--k")) opt.k = ks;

    try {
        trajgpt::cli::run(opt, std::cerr);
    } catch (const trajgpt::ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const trajgpt::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const trajgpt::NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
