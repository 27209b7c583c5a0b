#include "trajgpt/odebridge/odebridge.hpp"

#include <cmath>

namespace trajgpt::ode {

std::string to_string(GapMode m) {
    return m == GapMode::full ? "full" : "history_only";
}

GapMode gap_mode_from_string(const std::string& s) {
    if (s == "history" || s == "history_only") {
        return GapMode::history_only;
    }
    if (s == "full") {
        return GapMode::full;
    }
    throw ContractViolation("unknown gap mode '" + s + "' (expected history or full)");
}

ContinuousParams zoh_lift(double gamma, std::span<const double> k_row,
                          std::span<const double> q_row, double delta) {
    require(gamma > 0.0 && gamma <= 1.0, "zoh_lift: gamma must lie in (0, 1]");
    require(delta > 0.0, "zoh_lift: delta must be positive");
    require(k_row.size() == q_row.size(), "zoh_lift: k and q must have equal length");
    const std::size_t n = k_row.size();
    ContinuousParams cp;
    cp.delta = delta;
    const double a = std::log(gamma) / delta;
    cp.a.assign(n, a);
    // B = A (e^{ΔA} − I)^{-1} Kᵀ; as A → 0 the factor tends to 1/Δ.
    const double factor = a == 0.0 ? 1.0 / delta : a / std::expm1(delta * a);
    cp.b = Matrix<double>(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        cp.b[i] = factor * k_row[i];
    }
    cp.c.assign(q_row.begin(), q_row.end());
    return cp;
}

DiscreteParams zoh_discretize(const ContinuousParams& cp) {
    require(cp.delta > 0.0, "zoh_discretize: delta must be positive");
    require(cp.b.rows() == cp.a.size(), "zoh_discretize: B must have one row per state");
    DiscreteParams dp;
    dp.a_bar.resize(cp.a.size());
    dp.b_bar = Matrix<double>(cp.b.rows(), cp.b.cols());
    for (std::size_t i = 0; i < cp.a.size(); ++i) {
        const double a = cp.a[i];
        dp.a_bar[i] = std::exp(cp.delta * a);
        // B̄ = (e^{ΔA} − I) A^{-1} B, with the A → 0 limit ΔB.
        const double factor = a == 0.0 ? cp.delta : std::expm1(cp.delta * a) / a;
        for (std::size_t j = 0; j < cp.b.cols(); ++j) {
            dp.b_bar(i, j) = factor * cp.b(i, j);
        }
    }
    return dp;
}

template <typename T>
sra::State<T> gap_decay(const sra::State<T>& state, T gamma, double dt, GapMode mode) {
    require(dt >= 0.0, "gap_decay: dt must be non-negative");
    require(gamma > T{0} && gamma <= T{1}, "gap_decay: gamma must lie in (0, 1]");
    sra::State<T> out = state;
    const T factor = static_cast<T>(std::pow(static_cast<double>(gamma), dt));
    if (mode == GapMode::full) {
        for (std::size_t i = 0; i < out.s.size(); ++i) {
            out.s[i] = factor * state.s[i];
        }
        out.history = scaled(state.history, factor);
        out.last_kv = scaled(state.last_kv, factor);
    } else {
        for (std::size_t i = 0; i < out.s.size(); ++i) {
            out.history[i] = factor * state.history[i];
            out.s[i] = out.history[i] + state.last_kv[i];
        }
    }
    out.last_time = state.last_time + dt;
    return out;
}

template <typename T>
std::vector<T> time_specific_output(std::span<const sra::State<T>> states,
                                    std::span<const T> last_x_row, const sra::Params<T>& params,
                                    double t_target, GapMode mode) {
    const sra::Config& cfg = params.config;
    require(states.size() == cfg.heads, "time_specific_output: one state per head required");
    require(last_x_row.size() == cfg.width, "time_specific_output: x row must have width d");
    const std::size_t dh = cfg.head_dim();
    Matrix<T> q = matmul(Matrix<T>::row_vector(last_x_row), params.weights.w_q);
    if (cfg.use_rope) {
        const double t[] = {t_target};
        q = rope_rows(q, std::span<const double>(t), cfg.rope);
    }
    q = scaled(q, static_cast<T>(cfg.effective_query_scale()));
    std::vector<T> out(cfg.width, T{0});
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto& st = states[h];
        require(t_target >= st.last_time, "time_specific_output: target precedes the last observation");
        const sra::State<T> evolved = gap_decay(st, st.last_gamma, t_target - st.last_time, mode);
        for (std::size_t i = 0; i < dh; ++i) {
            const T qi = q[h * dh + i];
            for (std::size_t j = 0; j < dh; ++j) {
                out[h * dh + j] += qi * evolved.s(i, j);
            }
        }
    }
    return out;
}

Matrix<double> unrolled_ssm_forward(const Matrix<double>& x_rows, std::span<const double> times,
                                    const sra::Params<double>& params, double delta) {
    const auto p = sra::project(x_rows, times, times, params);
    const std::size_t n = x_rows.rows();
    const std::size_t dh = params.config.head_dim();
    std::vector<Matrix<double>> heads;
    for (std::size_t h = 0; h < params.config.heads; ++h) {
        Matrix<double> s(dh, dh);
        Matrix<double> out(n, dh);
        for (std::size_t t = 0; t < n; ++t) {
            const auto k = p.k.row(t).subspan(h * dh, dh);
            const auto q = p.q.row(t).subspan(h * dh, dh);
            const auto v = p.v.row(t).subspan(h * dh, dh);
            const DiscreteParams dp = zoh_discretize(zoh_lift(p.gammas(t, h), k, q, delta));
            // S_t = Ā S_{t−1} + B̄ X_t with X_t = V_t, O_t = C S_t
            for (std::size_t i = 0; i < dh; ++i) {
                for (std::size_t j = 0; j < dh; ++j) {
                    s(i, j) = dp.a_bar[i] * s(i, j) + dp.b_bar[i] * v[j];
                }
            }
            for (std::size_t j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < dh; ++i) {
                    acc += q[i] * s(i, j);
                }
                out(t, j) = acc;
            }
        }
        heads.push_back(std::move(out));
    }
    return sra::mix_heads(heads, params.weights.w_o);
}

template sra::State<float> gap_decay(const sra::State<float>&, float, double, GapMode);
template sra::State<double> gap_decay(const sra::State<double>&, double, double, GapMode);
template std::vector<float> time_specific_output(std::span<const sra::State<float>>,
                                                 std::span<const float>,
                                                 const sra::Params<float>&, double, GapMode);
template std::vector<double> time_specific_output(std::span<const sra::State<double>>,
                                                  std::span<const double>,
                                                  const sra::Params<double>&, double, GapMode);

}  // namespace trajgpt::ode
