#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgpt/datagen/datagen.hpp"
#include "trajgpt/inference/inference.hpp"
#include "trajgpt/model/model.hpp"

namespace trajgpt::cli {

std::vector<model::Sequence> to_sequences(const std::vector<data::Record>& records);

/// Step callback: (step, loss).
using StepHook = std::function<void(std::size_t, double)>;

/// Runs optimizer steps ck.step+1 .. until_step on `train`, updating ck in
/// place. Batches depend only on (cfg.seed, step), so stopping and resuming
/// from a saved checkpoint reproduces an uninterrupted run exactly.
template <typename T>
void pretrain(model::Checkpoint<T>& ck, std::span<const model::Sequence> train,
              const model::TrainConfig& cfg, std::size_t until_step, const StepHook& hook = {});

/// Fresh checkpoint at step 0 with zeroed optimizer moments.
template <typename T>
model::Checkpoint<T> initial_checkpoint(const model::ModelConfig& mc, const model::TrainConfig& tc);

struct EvalOptions {
    std::vector<std::size_t> ks{5, 10, 15};
    std::size_t lookup = 24;
    ode::GapMode gap_mode = ode::GapMode::history_only;
    double unit = 1.0;
    std::size_t max_patients = 0;  // 0 means all
    std::vector<infer::InferenceMode> modes{infer::InferenceMode::time_specific,
                                     infer::InferenceMode::auto_regressive};
};

/// Upper edges of the forecast-window buckets (targets counted from the end
/// of the look-up window, 1-based); the last bucket is open.
inline const std::vector<std::size_t> kBucketEdges{5, 10, 20};
std::string bucket_name(std::size_t offset);

/// Probability rows and truths for one inference mode over every target.
struct TargetSet {
    std::vector<std::vector<double>> probs;
    std::vector<int> truth;
    std::vector<std::size_t> offsets;  // position after the look-up window, 1-based
};

template <typename T>
TargetSet collect_targets(const model::ModelParams<T>& params, const std::vector<data::Record>& records,
                          infer::InferenceMode mode, const EvalOptions& opt);

/// Bayes-oracle rows on the same targets (time-aware: the oracle knows the target time).
TargetSet oracle_targets(const data::GeneratorSpec& spec, const std::vector<data::Record>& records,
                         const EvalOptions& opt);

/// Marginal code frequencies over the training records (the frequency baseline).
std::vector<double> marginal_frequencies(const std::vector<data::Record>& records, std::size_t vocab);

TargetSet baseline_targets(const std::vector<double>& marginal, const TargetSet& like);

/// {"overall": {"5": r, ...}, "buckets": {"1-5": {...}, ...}, "targets": n}
nlohmann::json recall_summary(const TargetSet& t, std::span<const std::size_t> ks);

template <typename T>
nlohmann::json evaluate_report(const model::ModelParams<T>& params,
                               const std::vector<data::Record>& test, const EvalOptions& opt);

}  // namespace trajgpt::cli
