#include <cmath>
#include <limits>
#include <memory>

#include "trajgpt/sra/sra.hpp"

namespace trajgpt::ad {

template <typename T>
Var<T> decay_matrix(Var<T> gamma) {
    const Matrix<T>& g = gamma.value();
    require(g.cols() == 1 && g.rows() >= 1, "decay_matrix: gamma must be N x 1");
    const Matrix<T> d = sra::build_decay_matrix(
        sra::DecaySchedule<T>::from_gammas(std::vector<T>(g.storage())));
    const std::size_t ins[] = {gamma.id};
    return gamma.tape->push(d, ins, [ig = gamma.id](Tape<T>& tp, std::size_t self) {
        const Matrix<T>& gd = tp.grad(self);
        const Matrix<T>& dv = tp.value(self);
        const Matrix<T>& gv = tp.value(ig);
        const std::size_t n = dv.rows();
        Matrix<T> out(n, 1);
        // For row r: ∂/∂γ_t Σ_{m<t} G_rm D_rm = D_rt · P_t with
        // P_t = Σ_{m<t} G_rm Π_{s=m+1..t−1} γ_s, P_{t+1} = G_rt + γ_t P_t.
        for (std::size_t r = 0; r < n; ++r) {
            T running{0};
            for (std::size_t t = 1; t <= r; ++t) {
                running = gd(r, t - 1) + (t >= 2 ? gv[t - 1] * running : T{0});
                out[t] += dv(r, t) * running;
            }
        }
        tp.accumulate(ig, out);
    });
}

template <typename T>
Var<T> sra_scan(Var<T> q, Var<T> k, Var<T> v, Var<T> gamma) {
    const Matrix<T>& qv = q.value();
    const Matrix<T>& kv = k.value();
    const Matrix<T>& vv = v.value();
    const Matrix<T>& gv = gamma.value();
    const std::size_t n = qv.rows();
    const std::size_t dh = qv.cols();
    require(kv.rows() == n && vv.rows() == n && gv.rows() == n && gv.cols() == 1,
            "sra_scan: q, k, v, gamma must have equal length");
    require(kv.cols() == dh && vv.cols() == dh, "sra_scan: head width mismatch");

    auto states = std::make_shared<std::vector<T>>(n * dh * dh);
    Matrix<T> out(n, dh);
    sra::State<T> st = sra::State<T>::zero(dh);
    // a diverged run carries NaN through so the trainer can report it
    const bool finite = all_finite(qv) && all_finite(kv) && all_finite(vv) && all_finite(gv);
    if (!finite) {
        out.fill(std::numeric_limits<T>::quiet_NaN());
        std::fill(states->begin(), states->end(), std::numeric_limits<T>::quiet_NaN());
    }
    for (std::size_t t = 0; finite && t < n; ++t) {
        st.absorb(qv.row(t), kv.row(t), vv.row(t), gv[t], 0.0, out.row(t));
        std::copy(st.s.storage().begin(), st.s.storage().end(), states->begin() + t * dh * dh);
    }

    const std::size_t ins[] = {q.id, k.id, v.id, gamma.id};
    return q.tape->push(
        std::move(out), ins,
        [iq = q.id, ik = k.id, iv = v.id, ig = gamma.id, states, n, dh](Tape<T>& tp,
                                                                       std::size_t self) {
            const Matrix<T>& go = tp.grad(self);
            const Matrix<T>& qm = tp.value(iq);
            const Matrix<T>& km = tp.value(ik);
            const Matrix<T>& vm = tp.value(iv);
            const Matrix<T>& gm = tp.value(ig);
            Matrix<T> dq(n, dh);
            Matrix<T> dk(n, dh);
            Matrix<T> dv(n, dh);
            Matrix<T> dg(n, 1);
            std::vector<T> acc(dh * dh, T{0});  // ∂L/∂S_t
            for (std::size_t t = n; t-- > 0;) {
                const T* s_t = states->data() + t * dh * dh;
                for (std::size_t i = 0; i < dh; ++i) {
                    T dqi{0};
                    for (std::size_t j = 0; j < dh; ++j) {
                        acc[i * dh + j] += qm(t, i) * go(t, j);
                        dqi += go(t, j) * s_t[i * dh + j];
                    }
                    dq(t, i) = dqi;
                }
                for (std::size_t i = 0; i < dh; ++i) {
                    T dki{0};
                    for (std::size_t j = 0; j < dh; ++j) {
                        dki += acc[i * dh + j] * vm(t, j);
                        dv(t, j) += km(t, i) * acc[i * dh + j];
                    }
                    dk(t, i) = dki;
                }
                if (t > 0) {
                    const T* s_prev = states->data() + (t - 1) * dh * dh;
                    T dgt{0};
                    for (std::size_t idx = 0; idx < dh * dh; ++idx) {
                        dgt += acc[idx] * s_prev[idx];
                    }
                    dg[t] = dgt;
                }
                for (auto& a : acc) {
                    a *= gm[t];
                }
            }
            tp.accumulate(iq, dq);
            tp.accumulate(ik, dk);
            tp.accumulate(iv, dv);
            tp.accumulate(ig, dg);
        });
}

template <typename T>
Var<T> attention_block(Var<T> x, std::span<const double> key_times,
                       std::span<const double> query_times, const SraVars<T>& w,
                       const sra::Config& cfg, AttentionKind kind) {
    Tape<T>& tape = *x.tape;
    const std::size_t n = x.rows();
    require(n >= 1, "attention: empty sequence");
    require(key_times.size() == n && query_times.size() == n,
            "attention: one key time and one query time per row required");
    require(x.cols() == cfg.width, "attention: input width must equal d");

    Var<T> q = matmul(x, w.w_q);
    Var<T> k = matmul(x, w.w_k);
    Var<T> v = matmul(x, w.w_v);
    if (cfg.use_rope) {
        q = rope_rows(q, query_times, cfg.rope);
        k = rope_rows(k, key_times, cfg.rope);
    }
    q = scale(q, static_cast<T>(cfg.effective_query_scale()));

    std::optional<Var<T>> gammas;
    if (kind != AttentionKind::softmax) {
        if (cfg.fixed_gamma) {
            gammas = tape.constant(Matrix<T>(n, cfg.heads, static_cast<T>(*cfg.fixed_gamma)));
        } else {
            require(w.w_gamma.has_value(), "attention: learned gating needs w_gamma");
            gammas = sigmoid_pow(matmul_nt(x, *w.w_gamma), static_cast<T>(cfg.tau));
        }
    }

    const std::size_t dh = cfg.head_dim();
    std::vector<Var<T>> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Var<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        Var<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        Var<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        switch (kind) {
            case AttentionKind::sra_recurrent: {
                Var<T> gh = slice_cols(*gammas, h, h + 1);
                heads.push_back(sra_scan(qh, kh, vh, gh));
                break;
            }
            case AttentionKind::sra_parallel: {
                Var<T> gh = slice_cols(*gammas, h, h + 1);
                heads.push_back(matmul(hadamard(matmul_nt(qh, kh), decay_matrix(gh)), vh));
                break;
            }
            case AttentionKind::softmax: {
                heads.push_back(matmul(causal_softmax(matmul_nt(qh, kh)), vh));
                break;
            }
        }
    }
    Var<T> cat = heads.size() == 1 ? heads[0] : concat_cols(std::span<const Var<T>>(heads));
    return matmul(cat, w.w_o);
}

template Var<float> decay_matrix(Var<float>);
template Var<double> decay_matrix(Var<double>);
template Var<float> sra_scan(Var<float>, Var<float>, Var<float>, Var<float>);
template Var<double> sra_scan(Var<double>, Var<double>, Var<double>, Var<double>);
template Var<float> attention_block(Var<float>, std::span<const double>, std::span<const double>,
                                    const SraVars<float>&, const sra::Config&, AttentionKind);
template Var<double> attention_block(Var<double>, std::span<const double>,
                                     std::span<const double>, const SraVars<double>&,
                                     const sra::Config&, AttentionKind);

}  // namespace trajgpt::ad
