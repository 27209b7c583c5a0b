#pragma once

#include <span>
#include <string>
#include <vector>

#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/sra/sra.hpp"

namespace trajgpt::ode {

/// How a carried state is evolved across a gap with no observation.
///   history_only: s' = γ^Δt·(s − K_nᵀV_n) + K_nᵀV_n  (the most recent observation stays undecayed)
///   full:         s' = γ^Δt·s
enum class GapMode { history_only, full };

std::string to_string(GapMode m);
GapMode gap_mode_from_string(const std::string& s);

/// Continuous-time parameters (A, B, C, Δ) of one SRA step. A is diagonal with
/// all entries ln(γ)/Δ; B is head_dim×1 (the lifted Kᵀ); C is the query row.
struct ContinuousParams {
    std::vector<double> a;
    Matrix<double> b;
    std::vector<double> c;
    double delta = 1.0;
};

struct DiscreteParams {
    std::vector<double> a_bar;  // diagonal of Ā
    Matrix<double> b_bar;       // head_dim×1
};

ContinuousParams zoh_lift(double gamma, std::span<const double> k_row,
                          std::span<const double> q_row, double delta);

DiscreteParams zoh_discretize(const ContinuousParams& cp);

template <typename T>
sra::State<T> gap_decay(const sra::State<T>& state, T gamma, double dt, GapMode mode);

/// Output at t_target ≥ state.last_time for every head: the query is built
/// from `last_x_row` (the hidden row of the last observation), rotated to
/// t_target, and read against each head's state decayed over the gap with its
/// own last gate. Returns the concatenated head outputs (width d, before w_o).
template <typename T>
std::vector<T> time_specific_output(std::span<const sra::State<T>> states,
                                    std::span<const T> last_x_row, const sra::Params<T>& params,
                                    double t_target, GapMode mode);

/// Runs the sequence through the discrete SSM obtained by lifting every SRA
/// step to (A, B, C) and discretising it again with step `delta`. Returns
/// per-head outputs concatenated and mixed by w_o, like sra::recurrent_forward.
Matrix<double> unrolled_ssm_forward(const Matrix<double>& x_rows, std::span<const double> times,
                                    const sra::Params<double>& params, double delta = 1.0);

}  // namespace trajgpt::ode
