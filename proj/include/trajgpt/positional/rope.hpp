#pragma once

#include <span>
#include <utility>
#include <vector>

#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/numerics/tape.hpp"

namespace trajgpt {

/// Rotary encoding over real-valued timestamps. Pair j of a head is rotated
/// by θ_j·t with θ_j = time_scale · theta_base^(−2j/head_dim).
struct RopeConfig {
    std::size_t head_dim = 0;
    double theta_base = 10000.0;
    double time_scale = 1.0;
};

void validate(const RopeConfig& cfg);

std::vector<double> rope_frequencies(const RopeConfig& cfg);

/// Rotates each consecutive pair (v_2j, v_2j+1) counter-clockwise by θ_j·t.
template <typename T>
std::vector<T> rope_rotate(std::span<const T> v, double t, const RopeConfig& cfg);

/// Rotates every head_dim-wide block of row n by θ·times[n] (direction −1 rotates back).
template <typename T>
Matrix<T> rope_rows(const Matrix<T>& x, std::span<const double> times, const RopeConfig& cfg,
                    int direction = 1);

/// Rotates query rows at their timestamps and key rows at theirs. In the real
/// pair representation both use the same orientation so that ⟨Q_n, K_m⟩
/// depends on t_n − t_m only (the conjugate on K is carried by the real dot
/// product ⟨a, b⟩ = Re(a·conj(b))).
template <typename T>
std::pair<Matrix<T>, Matrix<T>> rope_apply(const Matrix<T>& q_rows, const Matrix<T>& k_rows,
                                           std::span<const double> times, const RopeConfig& cfg);

namespace ad {

template <typename T>
Var<T> rope_rows(Var<T> x, std::span<const double> times, const RopeConfig& cfg);

}  // namespace ad

}  // namespace trajgpt
