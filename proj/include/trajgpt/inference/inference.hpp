#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajgpt/model/model.hpp"
#include "trajgpt/odebridge/odebridge.hpp"

namespace trajgpt::infer {

enum class InferenceMode { auto_regressive, time_specific };
/// evaluation: the true token is absorbed after each target; rollout: the prediction is.
enum class AbsorbMode { evaluation, rollout };

std::string to_string(InferenceMode m);
std::string to_string(AbsorbMode m);

struct Forecast {
    std::vector<double> target_times;
    std::vector<int> predicted;               // argmax per target
    std::vector<std::vector<double>> probs;   // softmax row per target
};

std::vector<double> softmax(std::span<const float> logits);
std::vector<double> softmax(std::span<const double> logits);

/// Argmax with ties resolved to the lower id.
int argmax(std::span<const double> row);

/// Greedy decoding on the grid t_N + unit, t_N + 2·unit, ...; each prediction
/// is absorbed at its grid time. Every step costs O(1) in the prefix length.
template <typename T>
Forecast autoregressive_forecast(const model::ModelParams<T>& params, std::span<const int> tokens,
                                 std::span<const double> times, std::size_t horizon,
                                 double unit = 1.0);

/// Predicts at each target time by decaying the carried states over the gap
/// and querying at the target. `truth` is required in evaluation mode.
template <typename T>
Forecast time_specific_forecast(const model::ModelParams<T>& params, std::span<const int> tokens,
                                std::span<const double> times,
                                std::span<const double> target_times, ode::GapMode gap_mode,
                                AbsorbMode absorb = AbsorbMode::rollout,
                                std::span<const int> truth = {});

/// Evaluation-mode forecasts for observations lookup..N−1 of one sequence.
/// Auto-regressive targets are queried one unit after the previous
/// observation; time-specific targets at their true times.
template <typename T>
Forecast forecast_targets(const model::ModelParams<T>& params, std::span<const int> tokens,
                          std::span<const double> times, std::size_t lookup, InferenceMode mode,
                          ode::GapMode gap_mode, double unit = 1.0);

/// Top-K ids of a probability row, ties broken by lower id.
std::vector<int> topk_ids(std::span<const double> row, std::size_t k);

/// Fraction of targets whose truth is in the top-K of its row.
double topk_recall(const std::vector<std::vector<double>>& rows, std::span<const int> truth,
                   std::size_t k);

struct RiskTrajectory {
    int code = 0;
    std::vector<double> grid;
    std::vector<double> risk;
    std::vector<double> growth;  // risk[i+1] − risk[i]
};

/// Probability of `code` on the grid. A grid point at or after the first
/// observation sees the observations at or before it, decayed to the grid
/// time; a point before the first observation is queried on the
/// time-reversed sequence.
template <typename T>
RiskTrajectory risk_trajectory(const model::ModelParams<T>& params, std::span<const int> tokens,
                               std::span<const double> times, int code,
                               std::span<const double> grid, ode::GapMode gap_mode);

/// Mean final-layer (normed) hidden row over the first `truncate_at` observations.
template <typename T>
std::vector<double> sequence_embedding(const model::ModelParams<T>& params,
                                       std::span<const int> tokens, std::span<const double> times,
                                       std::size_t truncate_at);

double cosine(std::span<const double> a, std::span<const double> b);

struct Classification {
    int label = 0;
    double score = 0.0;  // best cosine minus second best
};

/// Nearest centroid by cosine; ties go to the lower label.
Classification nearest_centroid(const std::vector<std::pair<int, std::vector<double>>>& centroids,
                                std::span<const double> query);

/// Builds one centroid per label from the examples, then classifies `query`.
Classification centroid_classify(const std::vector<std::vector<double>>& embeddings,
                                 std::span<const int> labels, std::span<const double> query);

}  // namespace trajgpt::infer
