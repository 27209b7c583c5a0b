#include "trajgpt/model/model.hpp"

#include <cmath>
#include <random>

namespace trajgpt::model {

sra::Config ModelConfig::attention_config() const {
    sra::Config c = sra::make_config(d, heads, tau);
    c.rope.theta_base = theta_base;
    c.rope.time_scale = time_scale;
    c.use_rope = positional == Positional::rope;
    c.fixed_gamma = fixed_gamma;
    if (query_scale > 0.0) {
        c.query_scale = query_scale;
    }
    return c;
}

void validate(const ModelConfig& cfg) {
    require(cfg.vocab_size >= 2, "model: vocab_size must be at least 2");
    require(cfg.d > 0 && cfg.heads > 0 && cfg.layers > 0, "model: d, heads and layers must be positive");
    require(cfg.d % cfg.heads == 0, "model: d=" + std::to_string(cfg.d) +
                                        " is not divisible by heads=" + std::to_string(cfg.heads));
    require(cfg.head_dim() % 2 == 0, "model: head_dim must be even for rotary encoding");
    require(cfg.tau > 0.0, "model: tau must be positive");
    require(cfg.norm_eps > 0.0, "model: norm_eps must be positive");
    if (cfg.fixed_gamma) {
        require(*cfg.fixed_gamma > 0.0 && *cfg.fixed_gamma <= 1.0,
                "model: fixed_gamma must lie in (0, 1]");
    }
    sra::validate(cfg.attention_config());
}

std::string to_string(Positional p) {
    return p == Positional::rope ? "rope" : "absolute";
}

std::string to_string(Attention a) {
    return a == Attention::sra ? "sra" : "softmax";
}

nlohmann::json to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d"] = cfg.d;
    j["heads"] = cfg.heads;
    j["layers"] = cfg.layers;
    j["ff_width"] = cfg.ff();
    j["tau"] = cfg.tau;
    j["theta_base"] = cfg.theta_base;
    j["time_scale"] = cfg.time_scale;
    j["precision"] = to_string(cfg.precision);
    j["fixed_gamma"] = cfg.fixed_gamma ? nlohmann::json(*cfg.fixed_gamma) : nlohmann::json(nullptr);
    j["positional"] = to_string(cfg.positional);
    j["attention"] = to_string(cfg.attention);
    j["tie_embeddings"] = cfg.tie_embeddings;
    j["norm_eps"] = cfg.norm_eps;
    j["query_scale"] = cfg.attention_config().effective_query_scale();
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), "model config must be a JSON object");
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "vocab_size") {
                c.vocab_size = value.get<std::size_t>();
            } else if (key == "d") {
                c.d = value.get<std::size_t>();
            } else if (key == "heads") {
                c.heads = value.get<std::size_t>();
            } else if (key == "layers") {
                c.layers = value.get<std::size_t>();
            } else if (key == "ff_width") {
                c.ff_width = value.get<std::size_t>();
            } else if (key == "tau") {
                c.tau = value.get<double>();
            } else if (key == "theta_base") {
                c.theta_base = value.get<double>();
            } else if (key == "time_scale") {
                c.time_scale = value.get<double>();
            } else if (key == "precision") {
                c.precision = precision_from_string(value.get<std::string>());
            } else if (key == "fixed_gamma") {
                if (!value.is_null()) {
                    c.fixed_gamma = value.get<double>();
                }
            } else if (key == "positional") {
                const auto s = value.get<std::string>();
                require(s == "rope" || s == "absolute", "model: positional must be rope or absolute");
                c.positional = s == "rope" ? Positional::rope : Positional::absolute;
            } else if (key == "attention") {
                const auto s = value.get<std::string>();
                require(s == "sra" || s == "softmax", "model: attention must be sra or softmax");
                c.attention = s == "sra" ? Attention::sra : Attention::softmax;
            } else if (key == "tie_embeddings") {
                c.tie_embeddings = value.get<bool>();
            } else if (key == "norm_eps") {
                c.norm_eps = value.get<double>();
            } else if (key == "query_scale") {
                c.query_scale = value.get<double>();
            } else {
                throw ContractViolation("model config: unknown key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ContractViolation("model config: bad value for '" + key + "': " + e.what());
        }
    }
    validate(c);
    return c;
}

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> ModelParams<T>::tensors() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        auto& l = layers[i];
        out.emplace_back(p + "norm1", &l.norm1);
        out.emplace_back(p + "attn.w_q", &l.attn.w_q);
        out.emplace_back(p + "attn.w_k", &l.attn.w_k);
        out.emplace_back(p + "attn.w_v", &l.attn.w_v);
        out.emplace_back(p + "attn.w_o", &l.attn.w_o);
        if (config.attention == Attention::sra && !config.fixed_gamma) {
            out.emplace_back(p + "attn.w_gamma", &l.attn.w_gamma);
        }
        out.emplace_back(p + "norm2", &l.norm2);
        out.emplace_back(p + "ff_w1", &l.ff_w1);
        out.emplace_back(p + "ff_b1", &l.ff_b1);
        out.emplace_back(p + "ff_w2", &l.ff_w2);
        out.emplace_back(p + "ff_b2", &l.ff_b2);
    }
    out.emplace_back("final_norm", &final_norm);
    if (!config.tie_embeddings) {
        out.emplace_back("head_w", &head_w);
    }
    out.emplace_back("head_b", &head_b);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> ModelParams<T>::tensors() const {
    auto mut = const_cast<ModelParams<T>*>(this)->tensors();
    std::vector<std::pair<std::string, const Matrix<T>*>> out;
    out.reserve(mut.size());
    for (auto& [name, ptr] : mut) {
        out.emplace_back(name, ptr);
    }
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors()) {
        n += m->size();
    }
    return n;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    const std::size_t d = cfg.d;
    const std::size_t v = cfg.vocab_size;
    ModelParams<T> p;
    p.config = cfg;
    p.embedding = Matrix<T>(v, d);
    p.layers.resize(cfg.layers);
    for (auto& l : p.layers) {
        l.norm1 = Matrix<T>(1, d, T{1});
        l.attn.w_q = Matrix<T>(d, d);
        l.attn.w_k = Matrix<T>(d, d);
        l.attn.w_v = Matrix<T>(d, d);
        l.attn.w_o = Matrix<T>(d, d);
        if (cfg.attention == Attention::sra && !cfg.fixed_gamma) {
            l.attn.w_gamma = Matrix<T>(cfg.heads, d);
        }
        l.norm2 = Matrix<T>(1, d, T{1});
        l.ff_w1 = Matrix<T>(d, cfg.ff());
        l.ff_b1 = Matrix<T>(1, cfg.ff());
        l.ff_w2 = Matrix<T>(cfg.ff(), d);
        l.ff_b2 = Matrix<T>(1, d);
    }
    p.final_norm = Matrix<T>(1, d, T{1});
    if (!cfg.tie_embeddings) {
        p.head_w = Matrix<T>(d, v);
    }
    p.head_b = Matrix<T>(1, v);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    for (auto& [name, m] : p.tensors()) {
        const bool is_gain = name.find("norm") != std::string::npos;
        const bool is_bias = name.ends_with("_b1") || name.ends_with("_b2") || name == "head_b";
        if (is_gain || is_bias) {
            continue;
        }
        double stdev = 1.0 / std::sqrt(static_cast<double>(name == "embedding" ? d : m->rows()));
        if (name.ends_with("w_o") || name.ends_with("ff_w2")) {
            stdev *= residual;
        }
        if (name.ends_with("w_gamma")) {
            stdev = 1.0 / std::sqrt(static_cast<double>(d));
        }
        for (auto& x : m->storage()) {
            x = static_cast<T>(stdev * normal(rng));
        }
    }
    return p;
}

template <typename T>
void validate(const ModelParams<T>& p) {
    validate(p.config);
    const auto& c = p.config;
    const auto shape = [](const Matrix<T>& m, std::size_t r, std::size_t cc) {
        return m.rows() == r && m.cols() == cc;
    };
    require(shape(p.embedding, c.vocab_size, c.d), "model: embedding must be vocab x d");
    require(p.layers.size() == c.layers, "model: layer count mismatch");
    for (const auto& l : p.layers) {
        require(shape(l.norm1, 1, c.d) && shape(l.norm2, 1, c.d), "model: norm gain shape");
        require(shape(l.attn.w_q, c.d, c.d) && shape(l.attn.w_k, c.d, c.d) &&
                    shape(l.attn.w_v, c.d, c.d) && shape(l.attn.w_o, c.d, c.d),
                "model: attention projection shape");
        if (c.attention == Attention::sra && !c.fixed_gamma) {
            require(shape(l.attn.w_gamma, c.heads, c.d), "model: w_gamma must be H x d");
        }
        require(shape(l.ff_w1, c.d, c.ff()) && shape(l.ff_b1, 1, c.ff()) &&
                    shape(l.ff_w2, c.ff(), c.d) && shape(l.ff_b2, 1, c.d),
                "model: feed-forward shape");
    }
    require(shape(p.final_norm, 1, c.d), "model: final norm shape");
    if (!c.tie_embeddings) {
        require(shape(p.head_w, c.d, c.vocab_size), "model: head_w must be d x vocab");
    }
    require(shape(p.head_b, 1, c.vocab_size), "model: head_b must be 1 x vocab");
}

namespace {

void check_times(std::span<const double> times) {
    for (std::size_t i = 0; i < times.size(); ++i) {
        require(std::isfinite(times[i]), "model: non-finite timestamp");
        require(i == 0 || times[i] >= times[i - 1],
                "model: timestamps must be non-decreasing (index " + std::to_string(i) + ")");
    }
}

}  // namespace

TrainingExample make_training_example(std::span<const int> tokens, std::span<const double> times) {
    require(!tokens.empty(), "model: empty sequence");
    require(tokens.size() == times.size(), "model: tokens and times must have equal length");
    check_times(times);
    const std::size_t n = tokens.size();
    TrainingExample ex;
    ex.input.tokens.reserve(n);
    ex.input.tokens.push_back(kSosId);
    ex.input.key_times.push_back(times[0]);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        ex.input.tokens.push_back(tokens[i]);
        ex.input.key_times.push_back(times[i]);
    }
    ex.input.query_times.assign(times.begin(), times.end());
    ex.targets.assign(tokens.begin(), tokens.end());
    return ex;
}

ModelInput make_prefix_input(std::span<const int> tokens, std::span<const double> times,
                             std::optional<double> final_query_time) {
    require(!tokens.empty(), "model: empty prefix");
    require(tokens.size() == times.size(), "model: tokens and times must have equal length");
    check_times(times);
    ModelInput in;
    in.tokens.push_back(kSosId);
    in.key_times.push_back(times[0]);
    in.query_times.push_back(times[0]);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        in.tokens.push_back(tokens[i]);
        in.key_times.push_back(times[i]);
        in.query_times.push_back(i + 1 < tokens.size() ? times[i + 1] : times[i]);
    }
    if (final_query_time) {
        require(*final_query_time >= times.back(), "model: final query time precedes the prefix");
        in.query_times.back() = *final_query_time;
    }
    return in;
}

template <typename T>
std::vector<T> absolute_encoding(std::size_t pos, std::size_t d) {
    std::vector<T> pe(d);
    for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        pe[i] = static_cast<T>(std::sin(static_cast<double>(pos) * freq));
        if (i + 1 < d) {
            pe[i + 1] = static_cast<T>(std::cos(static_cast<double>(pos) * freq));
        }
    }
    return pe;
}

template <typename T>
ModelVars<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
    validate(params);
    const auto put = [&](const Matrix<T>& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
    ModelVars<T> v;
    v.embedding = put(params.embedding);
    v.all.push_back(v.embedding);
    const bool gated = params.config.attention == Attention::sra && !params.config.fixed_gamma;
    for (const auto& l : params.layers) {
        typename ModelVars<T>::Layer lv;
        lv.norm1 = put(l.norm1);
        lv.attn.w_q = put(l.attn.w_q);
        lv.attn.w_k = put(l.attn.w_k);
        lv.attn.w_v = put(l.attn.w_v);
        lv.attn.w_o = put(l.attn.w_o);
        v.all.insert(v.all.end(), {lv.norm1, lv.attn.w_q, lv.attn.w_k, lv.attn.w_v, lv.attn.w_o});
        if (gated) {
            lv.attn.w_gamma = put(l.attn.w_gamma);
            v.all.push_back(*lv.attn.w_gamma);
        }
        lv.norm2 = put(l.norm2);
        lv.ff_w1 = put(l.ff_w1);
        lv.ff_b1 = put(l.ff_b1);
        lv.ff_w2 = put(l.ff_w2);
        lv.ff_b2 = put(l.ff_b2);
        v.all.insert(v.all.end(), {lv.norm2, lv.ff_w1, lv.ff_b1, lv.ff_w2, lv.ff_b2});
        v.layers.push_back(lv);
    }
    v.final_norm = put(params.final_norm);
    v.all.push_back(v.final_norm);
    if (!params.config.tie_embeddings) {
        v.head_w = put(params.head_w);
        v.all.push_back(*v.head_w);
    }
    v.head_b = put(params.head_b);
    v.all.push_back(v.head_b);
    return v;
}

template <typename T>
ForwardVars<T> forward_tape(const ModelVars<T>& vars, const ModelConfig& cfg,
                            const ModelInput& input, ad::AttentionKind sra_kind) {
    const std::size_t n = input.tokens.size();
    require(n >= 1, "forward: empty sequence");
    require(input.key_times.size() == n && input.query_times.size() == n,
            "forward: one key time and one query time per token required");
    check_times(input.key_times);
    for (std::size_t i = 0; i < n; ++i) {
        require(input.query_times[i] >= input.key_times[i],
                "forward: query time precedes its key time at index " + std::to_string(i));
    }
    for (int id : input.tokens) {
        require(id >= 0 && static_cast<std::size_t>(id) < cfg.vocab_size,
                "forward: token id " + std::to_string(id) + " outside vocabulary");
    }
    Tape<T>& tape = *vars.embedding.tape;
    const T eps = static_cast<T>(cfg.norm_eps);
    const sra::Config acfg = cfg.attention_config();
    const ad::AttentionKind kind =
        cfg.attention == Attention::softmax ? ad::AttentionKind::softmax : sra_kind;

    Var<T> h = ad::gather_rows(vars.embedding, std::span<const int>(input.tokens));
    if (cfg.positional == Positional::absolute) {
        Matrix<T> pe(n, cfg.d);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = absolute_encoding<T>(i, cfg.d);
            std::copy(row.begin(), row.end(), pe.row(i).begin());
        }
        h = ad::add(h, tape.constant(std::move(pe)));
    }
    for (const auto& l : vars.layers) {
        Var<T> a = ad::rms_norm(h, l.norm1, eps);
        h = ad::add(h, ad::attention_block(a, std::span<const double>(input.key_times),
                                           std::span<const double>(input.query_times), l.attn,
                                           acfg, kind));
        Var<T> f = ad::rms_norm(h, l.norm2, eps);
        f = ad::gelu(ad::add_row(ad::matmul(f, l.ff_w1), l.ff_b1));
        f = ad::add_row(ad::matmul(f, l.ff_w2), l.ff_b2);
        h = ad::add(h, f);
    }
    Var<T> hidden = ad::rms_norm(h, vars.final_norm, eps);
    Var<T> logits = vars.head_w ? ad::matmul(hidden, *vars.head_w)
                                : ad::matmul_nt(hidden, vars.embedding);
    logits = ad::add_row(logits, vars.head_b);
    return {hidden, logits};
}

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const ModelInput& input, sra::Form form) {
    Tape<T> tape;
    const ModelVars<T> vars = bind(tape, params, false);
    const auto kind =
        form == sra::Form::recurrent ? ad::AttentionKind::sra_recurrent : ad::AttentionKind::sra_parallel;
    const ForwardVars<T> out = forward_tape(vars, params.config, input, kind);
    return {out.hidden.value(), out.logits.value()};
}

template <typename T>
Matrix<T> forward(const ModelParams<T>& params, std::span<const int> tokens,
                  std::span<const double> times, sra::Form form) {
    require(tokens.size() == times.size(), "forward: tokens and times must have equal length");
    ModelInput in;
    in.tokens.assign(tokens.begin(), tokens.end());
    in.key_times.assign(times.begin(), times.end());
    in.query_times = in.key_times;
    return forward(params, in, form).logits;
}

template <typename T>
T nll_loss(const Matrix<T>& logits, std::span<const int> targets, int ignore_id) {
    require(targets.size() == logits.rows(), "nll_loss: one target per logits row required");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == ignore_id) {
            continue;
        }
        require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < logits.cols(),
                "nll_loss: target id out of range");
        const auto row = logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (T v : row) {
            z += std::exp(static_cast<double>(v) - mx);
        }
        total += std::log(z) + mx - static_cast<double>(row[targets[i]]);
        ++count;
    }
    require(count > 0, "nll_loss: no target left after masking");
    return static_cast<T>(total / static_cast<double>(count));
}

#define TRAJGPT_INSTANTIATE_MODEL(T)                                                         \
    template struct ModelParams<T>;                                                          \
    template ModelParams<T> init_params(const ModelConfig&, std::uint64_t);                  \
    template void validate(const ModelParams<T>&);                                           \
    template std::vector<T> absolute_encoding(std::size_t, std::size_t);                     \
    template ModelVars<T> bind(Tape<T>&, const ModelParams<T>&, bool);                       \
    template ForwardVars<T> forward_tape(const ModelVars<T>&, const ModelConfig&,            \
                                         const ModelInput&, ad::AttentionKind);              \
    template ForwardResult<T> forward(const ModelParams<T>&, const ModelInput&, sra::Form);  \
    template Matrix<T> forward(const ModelParams<T>&, std::span<const int>,                  \
                               std::span<const double>, sra::Form);                          \
    template T nll_loss(const Matrix<T>&, std::span<const int>, int);

TRAJGPT_INSTANTIATE_MODEL(float)
TRAJGPT_INSTANTIATE_MODEL(double)

#undef TRAJGPT_INSTANTIATE_MODEL

}  // namespace trajgpt::model
