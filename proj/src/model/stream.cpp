#include <cmath>

#include "trajgpt/model/model.hpp"

namespace trajgpt::model {

template <typename T>
Stream<T>::Stream(const ModelParams<T>& params) : params_(&params), acfg_(params.config.attention_config()) {
    validate(params);
}

template <typename T>
void Stream<T>::begin(double t0) {
    require(std::isfinite(t0), "stream: non-finite start time");
    const auto& cfg = params_->config;
    layers_.assign(cfg.layers, LayerState{});
    for (auto& l : layers_) {
        if (cfg.attention == Attention::sra) {
            l.heads.assign(cfg.heads, sra::State<T>::zero(cfg.head_dim()));
            for (auto& st : l.heads) {
                st.last_time = t0;
            }
        } else {
            l.k_cache = Matrix<T>(0, cfg.d);
            l.v_cache = Matrix<T>(0, cfg.d);
        }
    }
    pending_token_ = kSosId;
    pending_time_ = t0;
    committed_ = 0;
    started_ = true;
}

namespace {

template <typename T>
void append_row(Matrix<T>& m, std::span<const T> row) {
    std::vector<T> data = std::move(m.storage());
    data.insert(data.end(), row.begin(), row.end());
    m = Matrix<T>(m.rows() + 1, row.size(), std::move(data));
}

// o = q·S with the loop order used by State::absorb.
template <typename T>
void read_state(std::span<const T> q, const Matrix<T>& s, std::span<T> out) {
    const std::size_t n = s.rows();
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = T{0};
    }
    for (std::size_t i = 0; i < n; ++i) {
        const T qi = q[i];
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += qi * s[i * n + j];
        }
    }
}

}  // namespace

template <typename T>
std::vector<T> Stream<T>::run(double query_time, std::optional<ode::GapMode> gap, bool commit,
                              std::vector<T>* hidden_out) {
    require(started_, "stream: begin() must be called first");
    require(query_time >= pending_time_, "stream: query time precedes the pending observation");
    const ModelParams<T>& p = *params_;
    const ModelConfig& cfg = p.config;
    require(!gap || cfg.attention == Attention::sra,
            "stream: time-specific queries need SRA layers (not defined for softmax attention)");
    const std::size_t d = cfg.d;
    const std::size_t dh = cfg.head_dim();
    const T eps = static_cast<T>(cfg.norm_eps);
    const double qt[] = {query_time};
    const double kt[] = {pending_time_};

    Matrix<T> h = Matrix<T>::row_vector(p.embedding.row(static_cast<std::size_t>(pending_token_)));
    if (cfg.positional == Positional::absolute) {
        const auto pe = absolute_encoding<T>(committed_, d);
        h = add(h, Matrix<T>::row_vector(std::span<const T>(pe)));
    }
    for (std::size_t li = 0; li < cfg.layers; ++li) {
        const auto& lp = p.layers[li];
        LayerState& ls = layers_[li];
        const Matrix<T> a = rms_norm_rows(h, lp.norm1, eps);
        Matrix<T> q = matmul(a, lp.attn.w_q);
        Matrix<T> k = matmul(a, lp.attn.w_k);
        const Matrix<T> v = matmul(a, lp.attn.w_v);
        if (acfg_.use_rope) {
            q = rope_rows(q, std::span<const double>(qt), acfg_.rope);
            k = rope_rows(k, std::span<const double>(kt), acfg_.rope);
        }
        q = scaled(q, static_cast<T>(acfg_.effective_query_scale()));
        Matrix<T> cat(1, d);
        if (cfg.attention == Attention::sra) {
            Matrix<T> gam;
            if (acfg_.fixed_gamma) {
                gam = Matrix<T>(1, cfg.heads, static_cast<T>(*acfg_.fixed_gamma));
            } else {
                gam = matmul_nt(a, lp.attn.w_gamma);
                for (auto& g : gam.storage()) {
                    g = sigmoid_pow(g, static_cast<T>(acfg_.tau));
                }
            }
            for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
                sra::State<T> st = ls.heads[hd];
                const auto qh = q.row(0).subspan(hd * dh, dh);
                auto out = cat.row(0).subspan(hd * dh, dh);
                st.absorb(qh, k.row(0).subspan(hd * dh, dh), v.row(0).subspan(hd * dh, dh),
                          gam[hd], pending_time_, out);
                if (gap) {
                    const sra::State<T> evolved =
                        ode::gap_decay(st, st.last_gamma, query_time - pending_time_, *gap);
                    read_state<T>(qh, evolved.s, out);
                }
                if (commit) {
                    ls.heads[hd] = std::move(st);
                }
            }
        } else {
            Matrix<T> kc = ls.k_cache;
            Matrix<T> vc = ls.v_cache;
            append_row<T>(kc, k.row(0));
            append_row<T>(vc, v.row(0));
            const std::size_t n = kc.rows();
            for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
                const Matrix<T> qh = slice_cols(q, hd * dh, (hd + 1) * dh);
                const Matrix<T> kh = slice_cols(kc, hd * dh, (hd + 1) * dh);
                const Matrix<T> vh = slice_cols(vc, hd * dh, (hd + 1) * dh);
                Matrix<T> s = matmul_nt(qh, kh);
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    mx = std::max(mx, s[j]);
                }
                T z{0};
                for (std::size_t j = 0; j < n; ++j) {
                    s[j] = std::exp(s[j] - mx);
                    z += s[j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    s[j] /= z;
                }
                const Matrix<T> o = matmul(s, vh);
                std::copy(o.row(0).begin(), o.row(0).end(), cat.row(0).begin() + hd * dh);
            }
            if (commit) {
                ls.k_cache = std::move(kc);
                ls.v_cache = std::move(vc);
            }
        }
        h = add(h, matmul(cat, lp.attn.w_o));
        Matrix<T> f = rms_norm_rows(h, lp.norm2, eps);
        f = matmul(f, lp.ff_w1);
        for (std::size_t j = 0; j < f.cols(); ++j) {
            f[j] += lp.ff_b1[j];
        }
        for (auto& x : f.storage()) {
            x = gelu(x);
        }
        f = matmul(f, lp.ff_w2);
        for (std::size_t j = 0; j < f.cols(); ++j) {
            f[j] += lp.ff_b2[j];
        }
        h = add(h, f);
    }
    const Matrix<T> hidden = rms_norm_rows(h, p.final_norm, eps);
    Matrix<T> logits = cfg.tie_embeddings ? matmul_nt(hidden, p.embedding) : matmul(hidden, p.head_w);
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        logits[j] += p.head_b[j];
    }
    if (hidden_out) {
        *hidden_out = hidden.storage();
    }
    return logits.storage();
}

template <typename T>
void Stream<T>::absorb(int token, double time) {
    require(started_, "stream: begin() must be called first");
    require(token >= 0 && static_cast<std::size_t>(token) < params_->config.vocab_size,
            "stream: token id " + std::to_string(token) + " outside vocabulary");
    require(time >= pending_time_, "stream: timestamps must be non-decreasing");
    run(time, std::nullopt, true, nullptr);
    ++committed_;
    pending_token_ = token;
    pending_time_ = time;
}

template <typename T>
std::vector<T> Stream<T>::query(double query_time, std::optional<ode::GapMode> gap,
                                std::vector<T>* hidden_out) const {
    return const_cast<Stream<T>*>(this)->run(query_time, gap, false, hidden_out);
}

template class Stream<float>;
template class Stream<double>;

}  // namespace trajgpt::model
