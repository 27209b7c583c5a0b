#include <cmath>
#include <random>
#include <sstream>

#include "trajgpt/model/model.hpp"

namespace trajgpt::model {

nlohmann::json to_json(const TrainConfig& c) {
    return {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr},
            {"warmup", c.warmup}, {"clip", c.clip},           {"beta1", c.beta1},
            {"beta2", c.beta2}, {"eps", c.eps},               {"max_len", c.max_len},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), "train config must be a JSON object");
    TrainConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "steps") {
                c.steps = value.get<std::size_t>();
            } else if (key == "batch_size") {
                c.batch_size = value.get<std::size_t>();
            } else if (key == "lr") {
                c.lr = value.get<double>();
            } else if (key == "warmup") {
                c.warmup = value.get<std::size_t>();
            } else if (key == "clip") {
                c.clip = value.get<double>();
            } else if (key == "beta1") {
                c.beta1 = value.get<double>();
            } else if (key == "beta2") {
                c.beta2 = value.get<double>();
            } else if (key == "eps") {
                c.eps = value.get<double>();
            } else if (key == "max_len") {
                c.max_len = value.get<std::size_t>();
            } else if (key == "seed") {
                c.seed = value.get<std::uint64_t>();
            } else {
                throw ContractViolation("train config: unknown key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ContractViolation("train config: bad value for '" + key + "': " + e.what());
        }
    }
    require(c.batch_size >= 1, "train config: batch_size must be at least 1");
    require(c.lr >= 0.0, "train config: lr must be non-negative");
    require(c.max_len >= 1, "train config: max_len must be at least 1");
    require(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0,
            "train config: betas must lie in [0, 1)");
    return c;
}

template <typename T>
AdamState<T> AdamState<T>::zeros(const ModelParams<T>& params) {
    AdamState st;
    for (const auto& [name, m] : params.tensors()) {
        st.m.emplace_back(m->rows(), m->cols());
        st.v.emplace_back(m->rows(), m->cols());
    }
    return st;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup == 0 || step >= cfg.warmup) {
        return cfg.lr;
    }
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
}

template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& params, std::span<const Sequence> batch,
                             ad::AttentionKind sra_kind) {
    require(!batch.empty(), "train: empty batch");
    Tape<T> tape;
    const ModelVars<T> vars = bind(tape, params, true);
    const int pad = params.config.pad_id();
    std::optional<Var<T>> total;
    std::size_t count = 0;
    for (const auto& seq : batch) {
        const TrainingExample ex = make_training_example(seq.tokens, seq.times);
        for (int t : ex.targets) {
            count += t != pad ? 1 : 0;
        }
        const ForwardVars<T> fv = forward_tape(vars, params.config, ex.input, sra_kind);
        Var<T> ce = ad::cross_entropy_sum(fv.logits, std::span<const int>(ex.targets), pad);
        total = total ? ad::add(*total, ce) : ce;
    }
    require(count > 0, "train: batch holds only padding");
    Var<T> loss = ad::scale(*total, static_cast<T>(1.0 / static_cast<double>(count)));
    LossAndGrad<T> out{loss.value()[0], count, {}};
    tape.backward(loss);
    for (const auto& v : vars.all) {
        out.grads.push_back(v.grad());
    }
    return out;
}

namespace {

template <typename T>
std::string gradient_report(const ModelParams<T>& params, const std::vector<Matrix<T>>& grads) {
    std::ostringstream os;
    const auto named = params.tensors();
    for (std::size_t i = 0; i < named.size() && i < grads.size(); ++i) {
        double sq = 0.0;
        for (T g : grads[i].storage()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
        os << "\n  " << named[i].first << ": grad norm " << std::sqrt(sq);
    }
    return os.str();
}

}  // namespace

template <typename T>
T train_step(ModelParams<T>& params, AdamState<T>& opt, std::span<const Sequence> batch,
             const TrainConfig& cfg) {
    LossAndGrad<T> lg = loss_and_grad(params, batch);
    const auto named = params.tensors();
    bool finite = std::isfinite(lg.loss) && lg.grads.size() == named.size();
    double sq = 0.0;
    for (const auto& g : lg.grads) {
        finite = finite && all_finite(g);
        for (T x : g.storage()) {
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    if (!finite || !std::isfinite(sq)) {
        throw NumericFailure("non-finite loss or gradient at optimizer step " +
                             std::to_string(opt.step + 1) + " (loss " + std::to_string(lg.loss) +
                             ")" + gradient_report(params, lg.grads));
    }
    if (opt.m.size() != named.size()) {
        opt = AdamState<T>::zeros(params);
    }
    const double norm = std::sqrt(sq);
    const double clip = cfg.clip > 0.0 && norm > cfg.clip ? cfg.clip / norm : 1.0;
    ++opt.step;
    const double lr = learning_rate(cfg, opt.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < named.size(); ++i) {
        Matrix<T>& w = *named[i].second;
        Matrix<T>& m = opt.m[i];
        Matrix<T>& v = opt.v[i];
        const Matrix<T>& g = lg.grads[i];
        for (std::size_t e = 0; e < w.size(); ++e) {
            const double ge = static_cast<double>(g[e]) * clip;
            const double me = cfg.beta1 * static_cast<double>(m[e]) + (1.0 - cfg.beta1) * ge;
            const double ve = cfg.beta2 * static_cast<double>(v[e]) + (1.0 - cfg.beta2) * ge * ge;
            m[e] = static_cast<T>(me);
            v[e] = static_cast<T>(ve);
            if (lr > 0.0) {
                const double upd = lr * (me / c1) / (std::sqrt(ve / c2) + cfg.eps);
                w[e] = static_cast<T>(static_cast<double>(w[e]) - upd);
            }
        }
    }
    return lg.loss;
}

std::vector<Sequence> select_batch(std::span<const Sequence> data, const TrainConfig& cfg,
                                   std::size_t step) {
    require(!data.empty(), "train: empty training set");
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<Sequence> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng);
        const Sequence& s = data[idx];
        if (s.tokens.size() <= cfg.max_len) {
            batch.push_back(s);
            continue;
        }
        const std::size_t off =
            std::uniform_int_distribution<std::size_t>(0, s.tokens.size() - cfg.max_len)(rng);
        Sequence w;
        w.tokens.assign(s.tokens.begin() + off, s.tokens.begin() + off + cfg.max_len);
        w.times.assign(s.times.begin() + off, s.times.begin() + off + cfg.max_len);
        batch.push_back(std::move(w));
    }
    return batch;
}

template <typename T>
double evaluate_loss(const ModelParams<T>& params, std::span<const Sequence> data) {
    require(!data.empty(), "evaluate_loss: empty data set");
    const int pad = params.config.pad_id();
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : data) {
        const TrainingExample ex = make_training_example(s.tokens, s.times);
        const auto res = forward(params, ex.input);
        std::size_t c = 0;
        for (int t : ex.targets) {
            c += t != pad ? 1 : 0;
        }
        if (c == 0) {
            continue;
        }
        total += static_cast<double>(nll_loss(res.logits, std::span<const int>(ex.targets), pad)) *
                 static_cast<double>(c);
        count += c;
    }
    require(count > 0, "evaluate_loss: no targets");
    return total / static_cast<double>(count);
}

#define TRAJGPT_INSTANTIATE_TRAIN(T)                                                         \
    template struct AdamState<T>;                                                            \
    template LossAndGrad<T> loss_and_grad(const ModelParams<T>&, std::span<const Sequence>,  \
                                          ad::AttentionKind);                                \
    template T train_step(ModelParams<T>&, AdamState<T>&, std::span<const Sequence>,         \
                          const TrainConfig&);                                               \
    template double evaluate_loss(const ModelParams<T>&, std::span<const Sequence>);

TRAJGPT_INSTANTIATE_TRAIN(float)
TRAJGPT_INSTANTIATE_TRAIN(double)

#undef TRAJGPT_INSTANTIATE_TRAIN

}  // namespace trajgpt::model
