#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/numerics/tape.hpp"
#include "trajgpt/positional/rope.hpp"

namespace trajgpt::sra {

enum class Form { parallel, recurrent };

/// Hyper-parameters of one multi-head selective recurrent attention block.
struct Config {
    std::size_t width = 0;  // d
    std::size_t heads = 1;  // H
    double tau = 20.0;
    RopeConfig rope;  // rope.head_dim must equal width / heads
    bool use_rope = true;
    /// When set, every gate is this constant instead of σ(x·w_γ)^{1/τ}.
    std::optional<double> fixed_gamma;
    /// Queries are multiplied by this (1/√head_dim by default).
    double query_scale = 0.0;

    std::size_t head_dim() const { return heads == 0 ? 0 : width / heads; }
    double effective_query_scale() const;
};

void validate(const Config& cfg);

/// Builds a Config with rope.head_dim and query_scale filled in.
Config make_config(std::size_t width, std::size_t heads, double tau = 20.0);

template <typename T>
struct Weights {
    Matrix<T> w_q;      // d×d
    Matrix<T> w_k;      // d×d
    Matrix<T> w_v;      // d×d
    Matrix<T> w_o;      // d×d, mixes the concatenated heads
    Matrix<T> w_gamma;  // H×d, row h is the decay vector of head h
};

template <typename T>
struct Params {
    Config config;
    Weights<T> weights;
};

template <typename T>
void validate(const Params<T>& p);

/// Recurrent carrier of one head. `history` is γ_n·S_{n−1} and `last_kv` is
/// K_nᵀV_n, so s = history + last_kv holds exactly.
template <typename T>
struct State {
    Matrix<T> s;
    Matrix<T> history;
    Matrix<T> last_kv;
    double last_time = 0.0;
    T last_gamma = T{1};
    std::size_t steps = 0;

    static State zero(std::size_t head_dim);

    /// S ← γS + kᵀv; writes o = q·S into `out`.
    void absorb(std::span<const T> q, std::span<const T> k, std::span<const T> v, T gamma,
                double time, std::span<T> out);
};

/// Per-head gates and their running products b_n = Π_{t≤n} γ_t.
template <typename T>
struct DecaySchedule {
    std::vector<T> gammas;
    std::vector<T> cumulative;

    static DecaySchedule from_gammas(std::vector<T> gammas);
};

template <typename T>
T compute_gamma(std::span<const T> x_row, const Params<T>& params, std::size_t head);

/// N×H matrix of gates for every row of x.
template <typename T>
Matrix<T> gamma_matrix(const Matrix<T>& x_rows, const Params<T>& params);

/// Pure single step: returns the updated state and o_n = q_n·S_n.
template <typename T>
std::pair<State<T>, std::vector<T>> recurrent_step(const State<T>& state, std::span<const T> q,
                                                    std::span<const T> k, std::span<const T> v,
                                                    T gamma);

/// D_nm = Π_{t=m+1..n} γ_t for n ≥ m, 0 above the diagonal. Built from running
/// products along each row, never as b_n / b_m.
template <typename T>
Matrix<T> build_decay_matrix(const DecaySchedule<T>& schedule);

/// Single-head outputs (before the output projection), one matrix per head.
template <typename T>
std::vector<Matrix<T>> head_outputs(const Matrix<T>& x_rows, std::span<const double> key_times,
                                    std::span<const double> query_times, const Params<T>& params,
                                    Form form);

template <typename T>
Matrix<T> recurrent_forward(const Matrix<T>& x_rows, std::span<const double> times,
                            const Params<T>& params);
template <typename T>
Matrix<T> recurrent_forward(const Matrix<T>& x_rows, std::span<const double> key_times,
                            std::span<const double> query_times, const Params<T>& params);

template <typename T>
Matrix<T> parallel_forward(const Matrix<T>& x_rows, std::span<const double> times,
                           const Params<T>& params);
template <typename T>
Matrix<T> parallel_forward(const Matrix<T>& x_rows, std::span<const double> key_times,
                           std::span<const double> query_times, const Params<T>& params);

/// Heads run independently and their concatenation is mixed by w_o.
template <typename T>
Matrix<T> multi_head_forward(const Matrix<T>& x_rows, std::span<const double> times,
                             const Params<T>& params);

/// Concatenates head outputs and applies w_o.
template <typename T>
Matrix<T> mix_heads(const std::vector<Matrix<T>>& heads, const Matrix<T>& w_o);

/// Rotated/scaled per-layer projections shared by every evaluation path.
template <typename T>
struct Projections {
    Matrix<T> q;       // N×d, rotated at query times and scaled
    Matrix<T> k;       // N×d, rotated at key times
    Matrix<T> v;       // N×d
    Matrix<T> gammas;  // N×H
};

template <typename T>
Projections<T> project(const Matrix<T>& x_rows, std::span<const double> key_times,
                       std::span<const double> query_times, const Params<T>& params);

}  // namespace trajgpt::sra

namespace trajgpt::ad {

/// Tape version of build_decay_matrix: gamma is N×1, result N×N.
template <typename T>
Var<T> decay_matrix(Var<T> gamma);

/// Fused recurrent scan of one head: O_n = q_n S_n, S_n = γ_n S_{n−1} + k_nᵀv_n.
/// q, k, v are N×head_dim, gamma is N×1. Stores every S_n for the backward pass.
template <typename T>
Var<T> sra_scan(Var<T> q, Var<T> k, Var<T> v, Var<T> gamma);

template <typename T>
struct SraVars {
    Var<T> w_q;
    Var<T> w_k;
    Var<T> w_v;
    Var<T> w_o;
    std::optional<Var<T>> w_gamma;  // absent when the config fixes γ
};

enum class AttentionKind { sra_parallel, sra_recurrent, softmax };

/// Full multi-head attention block on the tape (projections, RoPE, gates,
/// per-head attention, concatenation, output projection).
template <typename T>
Var<T> attention_block(Var<T> x, std::span<const double> key_times,
                       std::span<const double> query_times, const SraVars<T>& w,
                       const sra::Config& cfg, AttentionKind kind);

}  // namespace trajgpt::ad
