#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgpt/cli/pipeline.hpp"

namespace trajgpt::cli {

/// Command-line overrides layered on top of the --config file.
struct Options {
    std::string command;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> checkpoint;
    std::optional<std::string> precision;
    std::optional<std::string> inference;  // auto | time | both
    std::optional<std::string> gap_mode;   // history | full
    std::optional<std::vector<std::size_t>> k;
};

inline const std::vector<std::string> kCommands{"generate", "pretrain", "evaluate", "forecast",
                                                "risk",     "embed",    "ablate",   "bench"};

/// Reads the config file and applies the overrides. The result is what gets hashed.
nlohmann::json effective_config(const Options& opt);

/// {"tool_version", "config_hash", "command"} block embedded in every output.
nlohmann::json meta_block(const nlohmann::json& config, const std::string& command);

/// Runs one command. Progress goes to `log`. Throws ContractViolation,
/// FormatError or NumericFailure.
void run(const Options& opt, std::ostream& log);

/// Trains and evaluates the ablation variants on one train/test split.
/// Variants: full, fixed_gamma, absolute_pe and (optionally) gpt2. Every
/// variant sees the same seeds, budget and batches.
struct AblationSetup {
    model::ModelConfig base;
    model::TrainConfig train;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    double fixed_gamma = 0.96;
    bool include_gpt2 = true;
    std::vector<std::string> variants;  // empty means all
    EvalOptions eval;
};

nlohmann::json run_ablation(const AblationSetup& setup, const std::vector<data::Record>& train,
                            const std::vector<data::Record>& test, std::ostream* log = nullptr);

struct BenchSetup {
    model::ModelConfig model;
    std::vector<std::size_t> lengths{256, 512, 1024, 2048};
    std::vector<std::size_t> histories{256, 1024};
    std::size_t repeats = 5;
    std::size_t queries = 2000;
    std::uint64_t seed = 1;
};

/// Wall-clock minima (seconds, medians kept alongside) and doubling ratios for forward+backward of
/// recurrent SRA, parallel SRA and softmax attention, plus time-specific
/// per-query latency against history length.
nlohmann::json run_bench(const BenchSetup& setup, std::ostream* log = nullptr);

}  // namespace trajgpt::cli
