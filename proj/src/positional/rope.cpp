#include "trajgpt/positional/rope.hpp"

#include <cmath>

namespace trajgpt {

void validate(const RopeConfig& cfg) {
    require(cfg.head_dim > 0 && cfg.head_dim % 2 == 0, "rope: head_dim must be even and positive");
    require(cfg.theta_base > 1.0, "rope: theta_base must exceed 1");
    require(cfg.time_scale > 0.0, "rope: time_scale must be positive");
}

std::vector<double> rope_frequencies(const RopeConfig& cfg) {
    validate(cfg);
    std::vector<double> theta(cfg.head_dim / 2);
    for (std::size_t j = 0; j < theta.size(); ++j) {
        theta[j] = cfg.time_scale *
                   std::pow(cfg.theta_base, -2.0 * static_cast<double>(j) / cfg.head_dim);
    }
    return theta;
}

namespace {

template <typename T>
void rotate_block(T* v, std::span<const double> theta, double t) {
    if (t == 0.0) {
        return;
    }
    for (std::size_t j = 0; j < theta.size(); ++j) {
        const double angle = theta[j] * t;
        const T c = static_cast<T>(std::cos(angle));
        const T s = static_cast<T>(std::sin(angle));
        const T x = v[2 * j];
        const T y = v[2 * j + 1];
        v[2 * j] = x * c - y * s;
        v[2 * j + 1] = x * s + y * c;
    }
}

}  // namespace

template <typename T>
std::vector<T> rope_rotate(std::span<const T> v, double t, const RopeConfig& cfg) {
    require(v.size() == cfg.head_dim, "rope_rotate: vector length must equal head_dim");
    const auto theta = rope_frequencies(cfg);
    std::vector<T> out(v.begin(), v.end());
    rotate_block(out.data(), std::span<const double>(theta), t);
    return out;
}

template <typename T>
Matrix<T> rope_rows(const Matrix<T>& x, std::span<const double> times, const RopeConfig& cfg,
                    int direction) {
    require(times.size() == x.rows(), "rope_rows: one timestamp per row required");
    require(x.cols() % cfg.head_dim == 0, "rope_rows: width must be a multiple of head_dim");
    const auto theta = rope_frequencies(cfg);
    Matrix<T> out = x;
    const double sign = direction >= 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t b = 0; b < x.cols(); b += cfg.head_dim) {
            rotate_block(out.data() + i * x.cols() + b, std::span<const double>(theta),
                         sign * times[i]);
        }
    }
    return out;
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> rope_apply(const Matrix<T>& q_rows, const Matrix<T>& k_rows,
                                           std::span<const double> times, const RopeConfig& cfg) {
    require(q_rows.rows() == times.size() && k_rows.rows() == times.size(),
            "rope_apply: q, k and times must have equal length");
    require(q_rows.cols() == cfg.head_dim && k_rows.cols() == cfg.head_dim,
            "rope_apply: row width must equal head_dim");
    return {rope_rows(q_rows, times, cfg), rope_rows(k_rows, times, cfg)};
}

namespace ad {

template <typename T>
Var<T> rope_rows(Var<T> x, std::span<const double> times, const RopeConfig& cfg) {
    const std::size_t ins[] = {x.id};
    return x.tape->push(trajgpt::rope_rows(x.value(), times, cfg), ins,
                        [ix = x.id, ts = std::vector<double>(times.begin(), times.end()),
                         cfg](Tape<T>& tp, std::size_t self) {
                            tp.accumulate(ix, trajgpt::rope_rows(tp.grad(self),
                                                                 std::span<const double>(ts), cfg,
                                                                 -1));
                        });
}

template Var<float> rope_rows(Var<float>, std::span<const double>, const RopeConfig&);
template Var<double> rope_rows(Var<double>, std::span<const double>, const RopeConfig&);

}  // namespace ad

template std::vector<float> rope_rotate(std::span<const float>, double, const RopeConfig&);
template std::vector<double> rope_rotate(std::span<const double>, double, const RopeConfig&);
template Matrix<float> rope_rows(const Matrix<float>&, std::span<const double>, const RopeConfig&,
                                 int);
template Matrix<double> rope_rows(const Matrix<double>&, std::span<const double>,
                                  const RopeConfig&, int);
template std::pair<Matrix<float>, Matrix<float>> rope_apply(const Matrix<float>&,
                                                            const Matrix<float>&,
                                                            std::span<const double>,
                                                            const RopeConfig&);
template std::pair<Matrix<double>, Matrix<double>> rope_apply(const Matrix<double>&,
                                                              const Matrix<double>&,
                                                              std::span<const double>,
                                                              const RopeConfig&);

}  // namespace trajgpt
