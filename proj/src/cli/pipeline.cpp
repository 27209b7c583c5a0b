#include "trajgpt/cli/pipeline.hpp"

#include <algorithm>

namespace trajgpt::cli {

std::vector<model::Sequence> to_sequences(const std::vector<data::Record>& records) {
    std::vector<model::Sequence> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back({r.tokens, r.times});
    }
    return out;
}

template <typename T>
model::Checkpoint<T> initial_checkpoint(const model::ModelConfig& mc, const model::TrainConfig& tc) {
    model::Checkpoint<T> ck;
    ck.params = model::init_params<T>(mc, tc.seed);
    ck.optimizer = model::AdamState<T>::zeros(ck.params);
    ck.seed = tc.seed;
    ck.step = 0;
    ck.extra["train"] = model::to_json(tc);
    return ck;
}

template <typename T>
void pretrain(model::Checkpoint<T>& ck, std::span<const model::Sequence> train,
              const model::TrainConfig& cfg, std::size_t until_step, const StepHook& hook) {
    if (!ck.optimizer) {
        ck.optimizer = model::AdamState<T>::zeros(ck.params);
    }
    for (std::size_t step = ck.step + 1; step <= until_step; ++step) {
        const auto batch = model::select_batch(train, cfg, step);
        const T loss = model::train_step(ck.params, *ck.optimizer, std::span<const model::Sequence>(batch), cfg);
        ck.step = step;
        if (hook) {
            hook(step, static_cast<double>(loss));
        }
    }
}

std::string bucket_name(std::size_t offset) {
    std::size_t lo = 1;
    for (std::size_t edge : kBucketEdges) {
        if (offset <= edge) {
            return std::to_string(lo) + "-" + std::to_string(edge);
        }
        lo = edge + 1;
    }
    return std::to_string(lo) + "+";
}

namespace {

std::vector<const data::Record*> usable(const std::vector<data::Record>& records, const EvalOptions& opt) {
    std::vector<const data::Record*> out;
    for (const auto& r : records) {
        if (r.tokens.size() <= opt.lookup) {
            continue;
        }
        out.push_back(&r);
        if (opt.max_patients > 0 && out.size() >= opt.max_patients) {
            break;
        }
    }
    return out;
}

}  // namespace

template <typename T>
TargetSet collect_targets(const model::ModelParams<T>& params, const std::vector<data::Record>& records,
                          infer::InferenceMode mode, const EvalOptions& opt) {
    TargetSet ts;
    for (const data::Record* r : usable(records, opt)) {
        auto f = infer::forecast_targets(params, std::span<const int>(r->tokens),
                                         std::span<const double>(r->times), opt.lookup, mode,
                                         opt.gap_mode, opt.unit);
        for (std::size_t i = 0; i < f.probs.size(); ++i) {
            ts.probs.push_back(std::move(f.probs[i]));
            ts.truth.push_back(r->tokens[opt.lookup + i]);
            ts.offsets.push_back(i + 1);
        }
    }
    return ts;
}

TargetSet oracle_targets(const data::GeneratorSpec& spec, const std::vector<data::Record>& records,
                         const EvalOptions& opt) {
    TargetSet ts;
    for (const data::Record* r : usable(records, opt)) {
        for (std::size_t j = opt.lookup; j < r->tokens.size(); ++j) {
            ts.probs.push_back(data::bayes_predictive(spec, std::span<const int>(r->tokens).first(j),
                                                      std::span<const double>(r->times).first(j),
                                                      r->times[j]));
            ts.truth.push_back(r->tokens[j]);
            ts.offsets.push_back(j - opt.lookup + 1);
        }
    }
    return ts;
}

std::vector<double> marginal_frequencies(const std::vector<data::Record>& records, std::size_t vocab) {
    std::vector<double> f(vocab, 0.0);
    double n = 0.0;
    for (const auto& r : records) {
        for (int t : r.tokens) {
            require(t >= 0 && static_cast<std::size_t>(t) < vocab, "marginal: token outside vocabulary");
            f[static_cast<std::size_t>(t)] += 1.0;
            n += 1.0;
        }
    }
    if (n > 0.0) {
        for (auto& v : f) {
            v /= n;
        }
    }
    return f;
}

TargetSet baseline_targets(const std::vector<double>& marginal, const TargetSet& like) {
    TargetSet ts;
    ts.truth = like.truth;
    ts.offsets = like.offsets;
    ts.probs.assign(like.truth.size(), marginal);
    return ts;
}

nlohmann::json recall_summary(const TargetSet& t, std::span<const std::size_t> ks) {
    nlohmann::json j;
    j["targets"] = t.truth.size();
    for (std::size_t k : ks) {
        j["overall"][std::to_string(k)] = infer::topk_recall(t.probs, t.truth, k);
    }
    std::map<std::string, TargetSet> buckets;
    for (std::size_t i = 0; i < t.truth.size(); ++i) {
        auto& b = buckets[bucket_name(t.offsets[i])];
        b.probs.push_back(t.probs[i]);
        b.truth.push_back(t.truth[i]);
    }
    j["buckets"] = nlohmann::json::object();
    for (const auto& [name, b] : buckets) {
        j["buckets"][name]["targets"] = b.truth.size();
        for (std::size_t k : ks) {
            j["buckets"][name][std::to_string(k)] = infer::topk_recall(b.probs, b.truth, k);
        }
    }
    return j;
}

template <typename T>
nlohmann::json evaluate_report(const model::ModelParams<T>& params,
                               const std::vector<data::Record>& test, const EvalOptions& opt) {
    for (std::size_t k : opt.ks) {
        require(k >= 1 && k <= params.config.vocab_size,
                "evaluate: K=" + std::to_string(k) + " exceeds the vocabulary size " +
                    std::to_string(params.config.vocab_size));
    }
    nlohmann::json rep;
    rep["absorb_mode"] = infer::to_string(infer::AbsorbMode::evaluation);
    rep["gap_mode"] = ode::to_string(opt.gap_mode);
    rep["lookup"] = opt.lookup;
    rep["unit"] = opt.unit;
    for (auto mode : opt.modes) {
        if (mode == infer::InferenceMode::time_specific &&
            params.config.attention != model::Attention::sra) {
            rep[infer::to_string(mode)] = "not_applicable";
            continue;
        }
        rep[infer::to_string(mode)] =
            recall_summary(collect_targets(params, test, mode, opt), std::span<const std::size_t>(opt.ks));
    }
    return rep;
}

#define TRAJGPT_INSTANTIATE_PIPELINE(T)                                                        \
    template model::Checkpoint<T> initial_checkpoint(const model::ModelConfig&,                \
                                                     const model::TrainConfig&);               \
    template void pretrain(model::Checkpoint<T>&, std::span<const model::Sequence>,            \
                           const model::TrainConfig&, std::size_t, const StepHook&);           \
    template TargetSet collect_targets(const model::ModelParams<T>&,                           \
                                       const std::vector<data::Record>&, infer::InferenceMode, \
                                       const EvalOptions&);                                    \
    template nlohmann::json evaluate_report(const model::ModelParams<T>&,                      \
                                            const std::vector<data::Record>&, const EvalOptions&);

TRAJGPT_INSTANTIATE_PIPELINE(float)
TRAJGPT_INSTANTIATE_PIPELINE(double)

#undef TRAJGPT_INSTANTIATE_PIPELINE

}  // namespace trajgpt::cli
