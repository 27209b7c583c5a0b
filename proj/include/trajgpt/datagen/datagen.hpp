#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace trajgpt::data {

/// After `trigger` is observed, the emission weight of `boosted` is multiplied
/// by 1 + (multiplier − 1)·exp(−elapsed / decay_years).
struct Boost {
    int trigger = 0;
    int boosted = 0;
    double multiplier = 1.0;
    double decay_years = 1.0;
};

/// Synthetic label rules. A negative id disables the label.
struct LabelRules {
    int drug_trigger = -1;
    int drug_code = -1;
    double drug_window = 0.5;
    int phenotype_state = -1;
};

/// Latent Markov chain over disease clusters. Each observation moves the chain
/// one step, waits an exponential gap whose rate belongs to the new state, and
/// emits one code from that state's categorical (reweighted by active boosts).
struct GeneratorSpec {
    int version = 1;
    std::size_t vocab_size = 0;
    std::size_t latent_states = 0;
    std::vector<std::vector<double>> transition;  // S×S, row-stochastic
    std::vector<std::vector<double>> emission;    // S×vocab, row-stochastic
    std::vector<double> gap_rates;                // events per year, per state
    std::vector<Boost> boosts;
    LabelRules labels;
    std::vector<double> initial;  // empty means the stationary distribution
    double start_age_min = 30.0;
    double start_age_max = 50.0;
    std::size_t min_len = 40;
    std::size_t max_len = 64;
};

inline constexpr int kSpecVersion = 1;

void validate(const GeneratorSpec& spec);

nlohmann::json to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const nlohmann::json& j);
GeneratorSpec load_spec(const std::string& path);
void save_spec(const GeneratorSpec& spec, const std::string& path);

/// The default benchmark: 8 clusters, vocabulary 50 (0 = [SOS], 49 = padding,
/// codes 1..48 emitted), gap rates between 0.2 and 3.0 per year.
GeneratorSpec canonical_spec();

/// FNV-1a of the canonical JSON text.
std::string spec_hash(const GeneratorSpec& spec);

/// Fixed point of the transition matrix (power iteration).
std::vector<double> stationary_distribution(const GeneratorSpec& spec);
/// Distribution of the first latent state.
std::vector<double> initial_distribution(const GeneratorSpec& spec);

/// One patient: ordered (code, age) pairs plus synthetic labels.
struct Record {
    std::string id;
    std::vector<int> tokens;
    std::vector<double> times;
    nlohmann::json labels = nlohmann::json::object();
};

void validate(const Record& r, std::size_t vocab_size = 0);

std::vector<Record> generate_cohort(const GeneratorSpec& spec, std::size_t n_patients,
                                    std::size_t min_len, std::size_t max_len, std::uint64_t seed);

/// Emission distribution for `state` at time t given the earlier observations.
std::vector<double> emission_at(const GeneratorSpec& spec, std::size_t state,
                                std::span<const int> history_tokens,
                                std::span<const double> history_times, double t);

/// Exact filtered posterior over the latent state of the last observation.
std::vector<double> filter_posterior(const GeneratorSpec& spec, std::span<const int> tokens,
                                     std::span<const double> times);

/// Predictive distribution of the next code. With a target time the gap
/// likelihood of that time and the boosts active at it are included; without
/// one the next state follows the transition alone and boosts are evaluated at
/// the last observation's time.
std::vector<double> bayes_predictive(const GeneratorSpec& spec, std::span<const int> tokens,
                                     std::span<const double> times,
                                     std::optional<double> target_time = std::nullopt);

/// Top-K of bayes_predictive, ties broken by lower id.
std::vector<int> bayes_topk(const GeneratorSpec& spec, std::span<const int> tokens,
                            std::span<const double> times, std::size_t k,
                            std::optional<double> target_time = std::nullopt);

/// Line-delimited JSON, one patient per line.
void write_dataset(const std::vector<Record>& records, const std::string& path);
std::vector<Record> read_dataset(const std::string& path, std::size_t vocab_size = 0);

struct Split {
    std::vector<Record> train;
    std::vector<Record> valid;
    std::vector<Record> test;
};

/// Patient-level split: valid and test get floor(n·fraction) patients, train
/// the remainder. Records keep their cohort order inside each part.
Split split(const std::vector<Record>& cohort, double train_fraction, double valid_fraction,
            double test_fraction, std::uint64_t seed);

}  // namespace trajgpt::data
