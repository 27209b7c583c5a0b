#pragma once

#include <cmath>
#include <random>

#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/sra/sra.hpp"

namespace testutil {

template <typename T>
trajgpt::Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    trajgpt::Matrix<T> m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = static_cast<T>(n(rng));
    }
    return m;
}

inline std::vector<double> increasing_times(std::size_t n, std::mt19937_64& rng, double start = 30.0) {
    std::exponential_distribution<double> gap(2.0);
    std::vector<double> t(n);
    double now = start;
    for (auto& v : t) {
        v = now;
        now += gap(rng);
    }
    return t;
}

template <typename T>
trajgpt::sra::Params<T> random_sra(std::size_t d, std::size_t h, std::mt19937_64& rng) {
    trajgpt::sra::Params<T> p;
    p.config = trajgpt::sra::make_config(d, h);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.weights.w_q = random_matrix<T>(d, d, rng, s);
    p.weights.w_k = random_matrix<T>(d, d, rng, s);
    p.weights.w_v = random_matrix<T>(d, d, rng, s);
    p.weights.w_o = random_matrix<T>(d, d, rng, s);
    p.weights.w_gamma = random_matrix<T>(h, d, rng, 3.0 * s);
    return p;
}

// Direct evaluation of the gated sum o_n = Σ_{m≤n} (Π_{t=m+1..n} γ_t) ⟨q_n,k_m⟩ v_m.
inline std::vector<double> gated_sum(const std::vector<std::vector<double>>& q,
                                     const std::vector<std::vector<double>>& k,
                                     const std::vector<std::vector<double>>& v,
                                     const std::vector<double>& gamma, std::size_t n) {
    std::vector<double> out(v[0].size(), 0.0);
    for (std::size_t m = 0; m <= n; ++m) {
        double w = 0.0;
        for (std::size_t i = 0; i < q[n].size(); ++i) {
            w += q[n][i] * k[m][i];
        }
        for (std::size_t t = m + 1; t <= n; ++t) {
            w *= gamma[t];
        }
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += w * v[m][j];
        }
    }
    return out;
}

}  // namespace testutil
