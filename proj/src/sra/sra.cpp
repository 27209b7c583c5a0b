#include "trajgpt/sra/sra.hpp"

#include <cmath>

namespace trajgpt::sra {

double Config::effective_query_scale() const {
    if (query_scale > 0.0) {
        return query_scale;
    }
    return 1.0 / std::sqrt(static_cast<double>(head_dim()));
}

void validate(const Config& cfg) {
    require(cfg.heads > 0 && cfg.width > 0, "sra: width and heads must be positive");
    require(cfg.width % cfg.heads == 0, "sra: width " + std::to_string(cfg.width) +
                                            " is not divisible by heads " +
                                            std::to_string(cfg.heads));
    require(cfg.tau > 0.0, "sra: tau must be positive");
    require(cfg.rope.head_dim == cfg.head_dim(), "sra: rope.head_dim must equal width / heads");
    if (cfg.use_rope) {
        validate(cfg.rope);
    }
    if (cfg.fixed_gamma) {
        require(*cfg.fixed_gamma > 0.0 && *cfg.fixed_gamma <= 1.0,
                "sra: fixed gamma must lie in (0, 1]");
    }
}

Config make_config(std::size_t width, std::size_t heads, double tau) {
    require(heads > 0 && width % heads == 0,
            "sra: width " + std::to_string(width) + " is not divisible by heads " +
                std::to_string(heads));
    Config cfg;
    cfg.width = width;
    cfg.heads = heads;
    cfg.tau = tau;
    cfg.rope.head_dim = width / heads;
    cfg.query_scale = 1.0 / std::sqrt(static_cast<double>(cfg.rope.head_dim));
    return cfg;
}

template <typename T>
void validate(const Params<T>& p) {
    validate(p.config);
    const std::size_t d = p.config.width;
    const auto square = [d](const Matrix<T>& m) { return m.rows() == d && m.cols() == d; };
    require(square(p.weights.w_q) && square(p.weights.w_k) && square(p.weights.w_v) &&
                square(p.weights.w_o),
            "sra: projection matrices must be d x d");
    if (!p.config.fixed_gamma) {
        require(p.weights.w_gamma.rows() == p.config.heads && p.weights.w_gamma.cols() == d,
                "sra: w_gamma must be H x d");
    }
}

template <typename T>
State<T> State<T>::zero(std::size_t head_dim) {
    State st;
    st.s = Matrix<T>(head_dim, head_dim);
    st.history = Matrix<T>(head_dim, head_dim);
    st.last_kv = Matrix<T>(head_dim, head_dim);
    return st;
}

template <typename T>
void State<T>::absorb(std::span<const T> q, std::span<const T> k, std::span<const T> v, T gamma,
                      double time, std::span<T> out) {
    const std::size_t n = s.rows();
    require(q.size() == n && k.size() == n && v.size() == n && out.size() == n,
            "sra step: vector length must equal head_dim");
    require(gamma > T{0} && gamma <= T{1}, "sra step: gamma must lie in (0, 1]");
    for (std::size_t i = 0; i < n; ++i) {
        require(std::isfinite(q[i]) && std::isfinite(k[i]) && std::isfinite(v[i]),
                "sra step: non-finite input");
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = i * n + j;
            history[idx] = gamma * s[idx];
            last_kv[idx] = k[i] * v[j];
            s[idx] = history[idx] + last_kv[idx];
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = T{0};
    }
    for (std::size_t i = 0; i < n; ++i) {
        const T qi = q[i];
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += qi * s[i * n + j];
        }
    }
    last_gamma = gamma;
    last_time = time;
    ++steps;
}

template <typename T>
DecaySchedule<T> DecaySchedule<T>::from_gammas(std::vector<T> gammas) {
    DecaySchedule sch;
    sch.cumulative.reserve(gammas.size());
    T b{1};
    for (T g : gammas) {
        require(g > T{0} && g <= T{1}, "decay schedule: every gamma must lie in (0, 1]");
        b *= g;
        sch.cumulative.push_back(b);
    }
    sch.gammas = std::move(gammas);
    return sch;
}

template <typename T>
T compute_gamma(std::span<const T> x_row, const Params<T>& params, std::size_t head) {
    require(head < params.config.heads, "compute_gamma: head index out of range");
    if (params.config.fixed_gamma) {
        return static_cast<T>(*params.config.fixed_gamma);
    }
    require(x_row.size() == params.config.width, "compute_gamma: x_row length must equal d");
    const T z = dot<T>(x_row, params.weights.w_gamma.row(head));
    return sigmoid_pow(z, static_cast<T>(params.config.tau));
}

template <typename T>
Matrix<T> gamma_matrix(const Matrix<T>& x_rows, const Params<T>& params) {
    if (params.config.fixed_gamma) {
        return Matrix<T>(x_rows.rows(), params.config.heads,
                         static_cast<T>(*params.config.fixed_gamma));
    }
    Matrix<T> z = matmul_nt(x_rows, params.weights.w_gamma);
    const T tau = static_cast<T>(params.config.tau);
    for (auto& v : z.storage()) {
        v = sigmoid_pow(v, tau);
    }
    return z;
}

template <typename T>
std::pair<State<T>, std::vector<T>> recurrent_step(const State<T>& state, std::span<const T> q,
                                                    std::span<const T> k, std::span<const T> v,
                                                    T gamma) {
    const auto finite = [](std::span<const T> xs) {
        for (T x : xs) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
        return true;
    };
    require(finite(q) && finite(k) && finite(v) && std::isfinite(gamma),
            "recurrent_step: non-finite input");
    State<T> next = state;
    std::vector<T> out(q.size());
    next.absorb(q, k, v, gamma, state.last_time, out);
    return {std::move(next), std::move(out)};
}

template <typename T>
Matrix<T> build_decay_matrix(const DecaySchedule<T>& schedule) {
    const std::size_t n = schedule.gammas.size();
    require(n >= 1, "build_decay_matrix: empty schedule");
    Matrix<T> d(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        d(r, r) = T{1};
        for (std::size_t m = r; m-- > 0;) {
            d(r, m) = d(r, m + 1) * schedule.gammas[m + 1];
        }
    }
    return d;
}

template <typename T>
Projections<T> project(const Matrix<T>& x_rows, std::span<const double> key_times,
                       std::span<const double> query_times, const Params<T>& params) {
    validate(params);
    require(x_rows.rows() >= 1, "sra: empty sequence");
    require(x_rows.cols() == params.config.width, "sra: x_rows width must equal d");
    require(key_times.size() == x_rows.rows() && query_times.size() == x_rows.rows(),
            "sra: x_rows and times must have equal length");
    const Config& cfg = params.config;
    Projections<T> p;
    p.q = matmul(x_rows, params.weights.w_q);
    p.k = matmul(x_rows, params.weights.w_k);
    p.v = matmul(x_rows, params.weights.w_v);
    if (cfg.use_rope) {
        p.q = rope_rows(p.q, query_times, cfg.rope);
        p.k = rope_rows(p.k, key_times, cfg.rope);
    }
    p.q = scaled(p.q, static_cast<T>(cfg.effective_query_scale()));
    p.gammas = gamma_matrix(x_rows, params);
    return p;
}

namespace {

template <typename T>
Matrix<T> scan_head(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                    std::span<const T> gammas, std::span<const double> key_times) {
    const std::size_t n = q.rows();
    State<T> st = State<T>::zero(q.cols());
    Matrix<T> out(n, q.cols());
    for (std::size_t t = 0; t < n; ++t) {
        st.absorb(q.row(t), k.row(t), v.row(t), gammas[t], key_times[t], out.row(t));
    }
    return out;
}

template <typename T>
Matrix<T> parallel_head(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                        std::vector<T> gammas) {
    const Matrix<T> d = build_decay_matrix(DecaySchedule<T>::from_gammas(std::move(gammas)));
    return matmul(hadamard(matmul_nt(q, k), d), v);
}

}  // namespace

template <typename T>
std::vector<Matrix<T>> head_outputs(const Matrix<T>& x_rows, std::span<const double> key_times,
                                    std::span<const double> query_times, const Params<T>& params,
                                    Form form) {
    const Projections<T> p = project(x_rows, key_times, query_times, params);
    const std::size_t dh = params.config.head_dim();
    std::vector<Matrix<T>> outs;
    for (std::size_t h = 0; h < params.config.heads; ++h) {
        const Matrix<T> qh = slice_cols(p.q, h * dh, (h + 1) * dh);
        const Matrix<T> kh = slice_cols(p.k, h * dh, (h + 1) * dh);
        const Matrix<T> vh = slice_cols(p.v, h * dh, (h + 1) * dh);
        std::vector<T> g(x_rows.rows());
        for (std::size_t t = 0; t < g.size(); ++t) {
            g[t] = p.gammas(t, h);
        }
        if (form == Form::recurrent) {
            outs.push_back(scan_head(qh, kh, vh, std::span<const T>(g), key_times));
        } else {
            outs.push_back(parallel_head(qh, kh, vh, std::move(g)));
        }
    }
    return outs;
}

template <typename T>
Matrix<T> mix_heads(const std::vector<Matrix<T>>& heads, const Matrix<T>& w_o) {
    require(!heads.empty(), "mix_heads: no heads");
    const std::size_t n = heads[0].rows();
    const std::size_t dh = heads[0].cols();
    Matrix<T> cat(n, dh * heads.size());
    for (std::size_t h = 0; h < heads.size(); ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(heads[h].row(i).begin(), heads[h].row(i).end(),
                      cat.data() + i * cat.cols() + h * dh);
        }
    }
    return matmul(cat, w_o);
}

template <typename T>
Matrix<T> recurrent_forward(const Matrix<T>& x_rows, std::span<const double> key_times,
                            std::span<const double> query_times, const Params<T>& params) {
    return mix_heads(head_outputs(x_rows, key_times, query_times, params, Form::recurrent),
                     params.weights.w_o);
}

template <typename T>
Matrix<T> recurrent_forward(const Matrix<T>& x_rows, std::span<const double> times,
                            const Params<T>& params) {
    return recurrent_forward(x_rows, times, times, params);
}

template <typename T>
Matrix<T> parallel_forward(const Matrix<T>& x_rows, std::span<const double> key_times,
                           std::span<const double> query_times, const Params<T>& params) {
    return mix_heads(head_outputs(x_rows, key_times, query_times, params, Form::parallel),
                     params.weights.w_o);
}

template <typename T>
Matrix<T> parallel_forward(const Matrix<T>& x_rows, std::span<const double> times,
                           const Params<T>& params) {
    return parallel_forward(x_rows, times, times, params);
}

template <typename T>
Matrix<T> multi_head_forward(const Matrix<T>& x_rows, std::span<const double> times,
                             const Params<T>& params) {
    return parallel_forward(x_rows, times, params);
}

#define TRAJGPT_INSTANTIATE_SRA(T)                                                            \
    template void validate(const Params<T>&);                                                 \
    template struct State<T>;                                                                 \
    template struct DecaySchedule<T>;                                                         \
    template T compute_gamma(std::span<const T>, const Params<T>&, std::size_t);              \
    template Matrix<T> gamma_matrix(const Matrix<T>&, const Params<T>&);                      \
    template std::pair<State<T>, std::vector<T>> recurrent_step(                              \
        const State<T>&, std::span<const T>, std::span<const T>, std::span<const T>, T);      \
    template Matrix<T> build_decay_matrix(const DecaySchedule<T>&);                           \
    template Projections<T> project(const Matrix<T>&, std::span<const double>,                \
                                    std::span<const double>, const Params<T>&);               \
    template std::vector<Matrix<T>> head_outputs(const Matrix<T>&, std::span<const double>,   \
                                                 std::span<const double>, const Params<T>&,   \
                                                 Form);                                       \
    template Matrix<T> mix_heads(const std::vector<Matrix<T>>&, const Matrix<T>&);            \
    template Matrix<T> recurrent_forward(const Matrix<T>&, std::span<const double>,           \
                                         const Params<T>&);                                   \
    template Matrix<T> recurrent_forward(const Matrix<T>&, std::span<const double>,           \
                                         std::span<const double>, const Params<T>&);          \
    template Matrix<T> parallel_forward(const Matrix<T>&, std::span<const double>,            \
                                        const Params<T>&);                                    \
    template Matrix<T> parallel_forward(const Matrix<T>&, std::span<const double>,            \
                                        std::span<const double>, const Params<T>&);           \
    template Matrix<T> multi_head_forward(const Matrix<T>&, std::span<const double>,          \
                                          const Params<T>&);

TRAJGPT_INSTANTIATE_SRA(float)
TRAJGPT_INSTANTIATE_SRA(double)

#undef TRAJGPT_INSTANTIATE_SRA

}  // namespace trajgpt::sra
