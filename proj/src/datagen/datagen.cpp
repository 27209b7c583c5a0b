#include "trajgpt/datagen/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "trajgpt/common.hpp"
#include "trajgpt/errors.hpp"

namespace trajgpt::data {

namespace {

void check_row(const std::vector<double>& row, std::size_t n, const std::string& what) {
    require(row.size() == n, what + ": row has " + std::to_string(row.size()) +
                                 " entries, expected " + std::to_string(n));
    double s = 0.0;
    for (double v : row) {
        require(std::isfinite(v) && v >= 0.0, what + ": entries must be finite and non-negative");
        s += v;
    }
    require(std::abs(s - 1.0) <= 1e-9, what + ": row sums to " + std::to_string(s));
}

}  // namespace

void validate(const GeneratorSpec& spec) {
    require(spec.version == kSpecVersion, "spec: unsupported version " + std::to_string(spec.version));
    require(spec.vocab_size >= 1, "spec: vocab_size must be positive");
    require(spec.latent_states >= 1, "spec: latent_states must be positive");
    const std::size_t s = spec.latent_states;
    require(spec.transition.size() == s, "spec: transition must have one row per state");
    require(spec.emission.size() == s, "spec: emission must have one row per state");
    require(spec.gap_rates.size() == s, "spec: gap_rates must have one entry per state");
    for (const auto& row : spec.transition) {
        check_row(row, s, "spec transition");
    }
    for (const auto& row : spec.emission) {
        check_row(row, spec.vocab_size, "spec emission");
    }
    for (double r : spec.gap_rates) {
        require(std::isfinite(r) && r > 0.0, "spec: gap rates must be positive");
    }
    const auto code_ok = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < spec.vocab_size; };
    for (const auto& b : spec.boosts) {
        require(code_ok(b.trigger) && code_ok(b.boosted), "spec: boost codes outside vocabulary");
        require(b.multiplier > 0.0, "spec: boost multipliers must be positive");
        require(b.decay_years > 0.0, "spec: boost decay must be positive");
    }
    if (!spec.initial.empty()) {
        check_row(spec.initial, s, "spec initial");
    }
    if (spec.labels.drug_trigger >= 0 || spec.labels.drug_code >= 0) {
        require(code_ok(spec.labels.drug_trigger) && code_ok(spec.labels.drug_code),
                "spec: drug label codes outside vocabulary");
        require(spec.labels.drug_window > 0.0, "spec: drug window must be positive");
    }
    require(spec.labels.phenotype_state < static_cast<int>(s), "spec: phenotype state out of range");
    require(spec.start_age_max >= spec.start_age_min, "spec: start age range is empty");
    require(spec.min_len >= 2 && spec.max_len >= spec.min_len, "spec: need 2 <= min_len <= max_len");
}

nlohmann::json to_json(const GeneratorSpec& spec) {
    nlohmann::json j;
    j["version"] = spec.version;
    j["vocab_size"] = spec.vocab_size;
    j["latent_states"] = spec.latent_states;
    j["transition"] = spec.transition;
    j["emission"] = spec.emission;
    j["gap_rates"] = spec.gap_rates;
    j["boosts"] = nlohmann::json::array();
    for (const auto& b : spec.boosts) {
        j["boosts"].push_back({{"trigger", b.trigger},
                               {"boosted", b.boosted},
                               {"multiplier", b.multiplier},
                               {"decay_years", b.decay_years}});
    }
    j["labels"] = {{"drug_trigger", spec.labels.drug_trigger},
                   {"drug_code", spec.labels.drug_code},
                   {"drug_window", spec.labels.drug_window},
                   {"phenotype_state", spec.labels.phenotype_state}};
    j["initial"] = spec.initial;
    j["start_age_min"] = spec.start_age_min;
    j["start_age_max"] = spec.start_age_max;
    j["min_len"] = spec.min_len;
    j["max_len"] = spec.max_len;
    return j;
}

GeneratorSpec spec_from_json(const nlohmann::json& j) {
    GeneratorSpec s;
    try {
        s.version = j.at("version").get<int>();
        s.vocab_size = j.at("vocab_size").get<std::size_t>();
        s.latent_states = j.at("latent_states").get<std::size_t>();
        s.transition = j.at("transition").get<std::vector<std::vector<double>>>();
        s.emission = j.at("emission").get<std::vector<std::vector<double>>>();
        s.gap_rates = j.at("gap_rates").get<std::vector<double>>();
        for (const auto& b : j.value("boosts", nlohmann::json::array())) {
            s.boosts.push_back({b.at("trigger").get<int>(), b.at("boosted").get<int>(),
                                b.at("multiplier").get<double>(), b.value("decay_years", 1.0)});
        }
        if (j.contains("labels")) {
            const auto& l = j.at("labels");
            s.labels.drug_trigger = l.value("drug_trigger", -1);
            s.labels.drug_code = l.value("drug_code", -1);
            s.labels.drug_window = l.value("drug_window", 0.5);
            s.labels.phenotype_state = l.value("phenotype_state", -1);
        }
        s.initial = j.value("initial", std::vector<double>{});
        s.start_age_min = j.value("start_age_min", 30.0);
        s.start_age_max = j.value("start_age_max", 50.0);
        s.min_len = j.value("min_len", std::size_t{40});
        s.max_len = j.value("max_len", std::size_t{64});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("generator spec: ") + e.what());
    }
    validate(s);
    return s;
}

GeneratorSpec load_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open generator spec " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("generator spec " + path + ": " + e.what());
    }
    return spec_from_json(j);
}

void save_spec(const GeneratorSpec& spec, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot write generator spec " + path);
    }
    out << to_json(spec).dump(1) << "\n";
}

GeneratorSpec canonical_spec() {
    GeneratorSpec s;
    s.vocab_size = 50;
    s.latent_states = 8;
    const std::size_t states = s.latent_states;
    const std::size_t per_state = 6;
    const std::size_t emitted = 48;  // codes 1..48
    s.transition.assign(states, std::vector<double>(states, 0.10 / 6.0));
    for (std::size_t i = 0; i < states; ++i) {
        s.transition[i][i] = 0.75;
        s.transition[i][(i + 1) % states] = 0.15;
    }
    const double primary_weights[per_state] = {6, 5, 4, 3, 2, 1};
    s.emission.assign(states, std::vector<double>(s.vocab_size, 0.0));
    for (std::size_t i = 0; i < states; ++i) {
        for (std::size_t c = 1; c <= emitted; ++c) {
            s.emission[i][c] = 0.15 / static_cast<double>(emitted - per_state);
        }
        for (std::size_t r = 0; r < per_state; ++r) {
            s.emission[i][1 + i * per_state + r] = 0.85 * primary_weights[r] / 21.0;
        }
    }
    s.gap_rates = {3.0, 0.3, 1.5, 0.2, 2.2, 0.6, 1.0, 0.45};
    s.boosts = {{2, 30, 10.0, 1.0}, {14, 45, 10.0, 1.0}};
    s.labels = {2, 30, 0.5, 7};
    return s;
}

std::string spec_hash(const GeneratorSpec& spec) {
    return hex64(fnv1a64(to_json(spec).dump()));
}

std::vector<double> stationary_distribution(const GeneratorSpec& spec) {
    validate(spec);
    const std::size_t n = spec.latent_states;
    std::vector<double> p(n, 1.0 / static_cast<double>(n));
    for (int it = 0; it < 100000; ++it) {
        std::vector<double> q(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                q[j] += p[i] * spec.transition[i][j];
            }
        }
        double diff = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diff = std::max(diff, std::abs(q[i] - p[i]));
        }
        // Average with the previous iterate so periodic chains converge too.
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = 0.5 * (p[i] + q[i]);
        }
        if (diff < 1e-15) {
            break;
        }
    }
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& v : p) {
        v /= s;
    }
    return p;
}

std::vector<double> initial_distribution(const GeneratorSpec& spec) {
    return spec.initial.empty() ? stationary_distribution(spec) : spec.initial;
}

void validate(const Record& r, std::size_t vocab_size) {
    require(r.tokens.size() == r.times.size(),
            "record " + r.id + ": tokens and times must have equal length");
    for (std::size_t i = 0; i < r.times.size(); ++i) {
        require(std::isfinite(r.times[i]), "record " + r.id + ": non-finite timestamp");
        require(i == 0 || r.times[i] >= r.times[i - 1],
                "record " + r.id + ": timestamps decrease at index " + std::to_string(i));
        require(r.tokens[i] >= 0, "record " + r.id + ": negative token id");
        require(vocab_size == 0 || static_cast<std::size_t>(r.tokens[i]) < vocab_size,
                "record " + r.id + ": token " + std::to_string(r.tokens[i]) + " outside vocabulary");
    }
}

std::vector<double> emission_at(const GeneratorSpec& spec, std::size_t state,
                                std::span<const int> history_tokens,
                                std::span<const double> history_times, double t) {
    require(state < spec.latent_states, "emission_at: state out of range");
    std::vector<double> w = spec.emission[state];
    bool boosted = false;
    for (const auto& b : spec.boosts) {
        // most recent occurrence of the trigger among earlier observations
        std::optional<double> last;
        for (std::size_t i = history_tokens.size(); i-- > 0;) {
            if (history_tokens[i] == b.trigger) {
                last = history_times[i];
                break;
            }
        }
        if (!last) {
            continue;
        }
        const double m = 1.0 + (b.multiplier - 1.0) * std::exp(-(t - *last) / b.decay_years);
        w[static_cast<std::size_t>(b.boosted)] *= m;
        boosted = true;
    }
    if (boosted) {
        const double s = std::accumulate(w.begin(), w.end(), 0.0);
        for (auto& v : w) {
            v /= s;
        }
    }
    return w;
}

namespace {

std::size_t draw(std::mt19937_64& rng, const std::vector<double>& probs) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
            return i;
        }
    }
    // rounding left u beyond the last partial sum: take the last positive entry
    for (std::size_t i = probs.size(); i-- > 0;) {
        if (probs[i] > 0.0) {
            return i;
        }
    }
    return 0;
}

}  // namespace

std::vector<Record> generate_cohort(const GeneratorSpec& spec, std::size_t n_patients,
                                    std::size_t min_len, std::size_t max_len, std::uint64_t seed) {
    validate(spec);
    require(min_len >= 2, "generate_cohort: min_len must be at least 2");
    require(max_len >= min_len, "generate_cohort: max_len must be at least min_len");
    const std::vector<double> init = initial_distribution(spec);
    std::vector<Record> out;
    out.reserve(n_patients);
    for (std::size_t p = 0; p < n_patients; ++p) {
        std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                         static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(p >> 32)};
        std::mt19937_64 rng(ss);
        const std::size_t len = std::uniform_int_distribution<std::size_t>(min_len, max_len)(rng);
        Record r;
        r.id = "p" + std::to_string(p);
        std::vector<int> latent;
        double t = std::uniform_real_distribution<double>(spec.start_age_min, spec.start_age_max)(rng);
        std::size_t z = draw(rng, init);
        for (std::size_t n = 0; n < len; ++n) {
            if (n > 0) {
                z = draw(rng, spec.transition[z]);
                t += std::exponential_distribution<double>(spec.gap_rates[z])(rng);
            }
            const auto probs = emission_at(spec, z, r.tokens, r.times, t);
            r.tokens.push_back(static_cast<int>(draw(rng, probs)));
            r.times.push_back(t);
            latent.push_back(static_cast<int>(z));
        }
        bool drug = false;
        if (spec.labels.drug_trigger >= 0) {
            const auto it = std::find(r.tokens.begin(), r.tokens.end(), spec.labels.drug_trigger);
            if (it != r.tokens.end()) {
                const double t0 = r.times[static_cast<std::size_t>(it - r.tokens.begin())];
                for (std::size_t i = static_cast<std::size_t>(it - r.tokens.begin()) + 1;
                     i < r.tokens.size(); ++i) {
                    if (r.times[i] > t0 + spec.labels.drug_window) {
                        break;
                    }
                    drug = drug || r.tokens[i] == spec.labels.drug_code;
                }
            }
        }
        const bool phenotype = spec.labels.phenotype_state >= 0 &&
                               std::find(latent.begin(), latent.end(), spec.labels.phenotype_state) !=
                                   latent.end();
        r.labels = {{"drug_start", drug}, {"phenotype_case", phenotype}, {"latent", latent}};
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<double> filter_posterior(const GeneratorSpec& spec, std::span<const int> tokens,
                                     std::span<const double> times) {
    require(!tokens.empty(), "filter_posterior: empty prefix");
    require(tokens.size() == times.size(), "filter_posterior: tokens and times differ in length");
    const std::size_t s = spec.latent_states;
    std::vector<double> alpha = initial_distribution(spec);
    for (std::size_t n = 0; n < tokens.size(); ++n) {
        require(tokens[n] >= 0 && static_cast<std::size_t>(tokens[n]) < spec.vocab_size,
                "filter_posterior: token outside vocabulary");
        std::vector<double> next(s, 0.0);
        if (n == 0) {
            next = alpha;
        } else {
            const double gap = times[n] - times[n - 1];
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    next[j] += alpha[i] * spec.transition[i][j];
                }
            }
            for (std::size_t j = 0; j < s; ++j) {
                next[j] *= spec.gap_rates[j] * std::exp(-spec.gap_rates[j] * gap);
            }
        }
        const auto hist_tok = tokens.first(n);
        const auto hist_t = times.first(n);
        double total = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
            next[j] *= emission_at(spec, j, hist_tok, hist_t, times[n])[static_cast<std::size_t>(tokens[n])];
            total += next[j];
        }
        require(total > 0.0, "filter_posterior: prefix has zero probability under the spec");
        for (auto& v : next) {
            v /= total;
        }
        alpha = std::move(next);
    }
    return alpha;
}

std::vector<double> bayes_predictive(const GeneratorSpec& spec, std::span<const int> tokens,
                                     std::span<const double> times, std::optional<double> target_time) {
    const std::vector<double> alpha = filter_posterior(spec, tokens, times);
    const std::size_t s = spec.latent_states;
    std::vector<double> next(s, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
            next[j] += alpha[i] * spec.transition[i][j];
        }
    }
    double t = times.back();
    if (target_time) {
        require(*target_time >= times.back(), "bayes_predictive: target precedes the prefix");
        t = *target_time;
        const double gap = t - times.back();
        for (std::size_t j = 0; j < s; ++j) {
            next[j] *= spec.gap_rates[j] * std::exp(-spec.gap_rates[j] * gap);
        }
    }
    const double z = std::accumulate(next.begin(), next.end(), 0.0);
    std::vector<double> pred(spec.vocab_size, 0.0);
    for (std::size_t j = 0; j < s; ++j) {
        const auto e = emission_at(spec, j, tokens, times, t);
        for (std::size_t c = 0; c < spec.vocab_size; ++c) {
            pred[c] += next[j] / z * e[c];
        }
    }
    return pred;
}

std::vector<int> bayes_topk(const GeneratorSpec& spec, std::span<const int> tokens,
                            std::span<const double> times, std::size_t k,
                            std::optional<double> target_time) {
    require(k >= 1 && k <= spec.vocab_size, "bayes_topk: K must lie in [1, vocab]");
    const auto pred = bayes_predictive(spec, tokens, times, target_time);
    std::vector<int> ids(spec.vocab_size);
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return pred[a] > pred[b]; });
    ids.resize(k);
    return ids;
}

void write_dataset(const std::vector<Record>& records, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write dataset " + path);
    }
    for (const auto& r : records) {
        validate(r);
        const nlohmann::json j = {{"id", r.id}, {"tokens", r.tokens}, {"times", r.times}, {"labels", r.labels}};
        out << j.dump() << "\n";
    }
    if (!out) {
        throw FormatError("write failed for dataset " + path);
    }
}

std::vector<Record> read_dataset(const std::string& path, std::size_t vocab_size) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open dataset " + path);
    }
    std::vector<Record> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = path + ":" + std::to_string(lineno);
        Record r;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto& id = j.at("id");
            r.id = id.is_string() ? id.get<std::string>() : id.dump();
            r.tokens = j.at("tokens").get<std::vector<int>>();
            r.times = j.at("times").get<std::vector<double>>();
            r.labels = j.value("labels", nlohmann::json::object());
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(where + ": malformed record: " + e.what());
        }
        try {
            validate(r, vocab_size);
        } catch (const ContractViolation& e) {
            throw FormatError(where + ": invalid record: " + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

Split split(const std::vector<Record>& cohort, double train_fraction, double valid_fraction,
            double test_fraction, std::uint64_t seed) {
    for (double f : {train_fraction, valid_fraction, test_fraction}) {
        require(std::isfinite(f) && f >= 0.0 && f <= 1.0, "split: fractions must lie in [0, 1]");
    }
    require(std::abs(train_fraction + valid_fraction + test_fraction - 1.0) <= 1e-9,
            "split: fractions must sum to 1");
    const std::size_t n = cohort.size();
    const auto count = [n](double f) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
    };
    const std::size_t n_valid = count(valid_fraction);
    const std::size_t n_test = count(test_fraction);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> part(n, 0);
    for (std::size_t i = 0; i < n_valid; ++i) {
        part[order[i]] = 1;
    }
    for (std::size_t i = n_valid; i < n_valid + n_test; ++i) {
        part[order[i]] = 2;
    }
    Split s;
    for (std::size_t i = 0; i < n; ++i) {
        (part[i] == 0 ? s.train : part[i] == 1 ? s.valid : s.test).push_back(cohort[i]);
    }
    return s;
}

}  // namespace trajgpt::data
