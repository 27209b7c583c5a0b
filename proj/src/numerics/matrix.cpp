#include "trajgpt/numerics/matrix.hpp"

#include <algorithm>
#include <limits>

namespace trajgpt {

std::string to_string(Precision p) {
    return p == Precision::f32 ? "f32" : "f64";
}

Precision precision_from_string(const std::string& s) {
    if (s == "f32" || s == "single") {
        return Precision::f32;
    }
    if (s == "f64" || s == "double") {
        return Precision::f64;
    }
    throw ContractViolation("unknown precision '" + s + "' (expected f32 or f64)");
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.cols() == b.rows(), "matmul: dimension mismatch (" + std::to_string(a.rows()) + "x" +
                                      std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                                      "x" + std::to_string(b.cols()) + ")");
    const std::size_t n = a.rows();
    const std::size_t k = a.cols();
    const std::size_t m = b.cols();
    Matrix<T> c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        T* crow = c.data() + i * m;
        const T* arow = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.cols() == b.cols(), "matmul_nt: dimension mismatch");
    const std::size_t n = a.rows();
    const std::size_t k = a.cols();
    const std::size_t m = b.rows();
    Matrix<T> c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const T* brow = b.data() + j * k;
            T acc{0};
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            c(i, j) = acc;
        }
    }
    return c;
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.rows() == b.rows(), "matmul_tn: dimension mismatch");
    const std::size_t n = a.cols();
    const std::size_t k = a.rows();
    const std::size_t m = b.cols();
    Matrix<T> c(n, m);
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a.data() + p * n;
        const T* brow = b.data() + p * m;
        for (std::size_t i = 0; i < n; ++i) {
            const T av = arow[i];
            T* crow = c.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Matrix<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] += b[i];
    }
    return c;
}

template <typename T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.same_shape(b), "sub: shape mismatch");
    Matrix<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] -= b[i];
    }
    return c;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.same_shape(b), "hadamard: shape mismatch");
    Matrix<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] *= b[i];
    }
    return c;
}

template <typename T>
Matrix<T> scaled(const Matrix<T>& a, T s) {
    Matrix<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] *= s;
    }
    return c;
}

template <typename T>
void axpy(Matrix<T>& a, T s, const Matrix<T>& b) {
    require(a.same_shape(b), "axpy: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += s * b[i];
    }
}

template <typename T>
Matrix<T> slice_cols(const Matrix<T>& a, std::size_t begin, std::size_t end) {
    require(begin <= end && end <= a.cols(), "slice_cols: range out of bounds");
    Matrix<T> s(a.rows(), end - begin);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::copy(a.data() + i * a.cols() + begin, a.data() + i * a.cols() + end,
                  s.data() + i * s.cols());
    }
    return s;
}

template <typename T>
Matrix<T> slice_rows(const Matrix<T>& a, std::size_t begin, std::size_t end) {
    require(begin <= end && end <= a.rows(), "slice_rows: range out of bounds");
    return Matrix<T>(end - begin, a.cols(),
                     std::vector<T>(a.data() + begin * a.cols(), a.data() + end * a.cols()));
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    require(a.size() == b.size(), "dot: length mismatch");
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

template <typename T>
T l2_norm(std::span<const T> a) {
    return std::sqrt(dot<T>(a, a));
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

template <typename T>
bool all_finite(const Matrix<T>& a) {
    return std::all_of(a.storage().begin(), a.storage().end(),
                       [](T v) { return std::isfinite(v); });
}

namespace {
constexpr double kSigmoidClamp = 50.0;
}

template <typename T>
T sigmoid_pow(T z, T tau) {
    require(tau > T{0}, "sigmoid_pow: tau must be positive");
    const T zc = std::clamp(z, T(-kSigmoidClamp), T(kSigmoidClamp));
    // σ(z)^{1/τ} = exp(-log1p(e^{-z}) / τ)
    return std::exp(-std::log1p(std::exp(-zc)) / tau);
}

template <typename T>
T sigmoid_pow_grad(T z, T tau) {
    if (z < T(-kSigmoidClamp) || z > T(kSigmoidClamp)) {
        return T{0};
    }
    // d/dz σ^{1/τ} = (1/τ) σ^{1/τ} (1 − σ)
    const T s = T{1} / (T{1} + std::exp(-z));
    return sigmoid_pow(z, tau) * (T{1} - s) / tau;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2.0 * 3.14159265358979323846));
    return cdf + x * pdf;
}

template <typename T>
Matrix<T> rms_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, T eps) {
    require(gain.rows() == 1 && gain.cols() == x.cols(), "rms_norm: gain shape mismatch");
    Matrix<T> y(x.rows(), x.cols());
    const std::size_t c = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        T ms{0};
        for (std::size_t j = 0; j < c; ++j) {
            ms += x(i, j) * x(i, j);
        }
        const T inv = T{1} / std::sqrt(ms / T(c) + eps);
        for (std::size_t j = 0; j < c; ++j) {
            y(i, j) = x(i, j) * inv * gain[j];
        }
    }
    return y;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        const T mx = *std::max_element(row.begin(), row.end());
        T z{0};
        for (std::size_t j = 0; j < row.size(); ++j) {
            p(i, j) = std::exp(row[j] - mx);
            z += p(i, j);
        }
        for (std::size_t j = 0; j < row.size(); ++j) {
            p(i, j) /= z;
        }
    }
    return p;
}

#define TRAJGPT_INSTANTIATE(T)                                                            \
    template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                        \
    template Matrix<T> matmul_nt(const Matrix<T>&, const Matrix<T>&);                     \
    template Matrix<T> matmul_tn(const Matrix<T>&, const Matrix<T>&);                     \
    template Matrix<T> transpose(const Matrix<T>&);                                       \
    template Matrix<T> add(const Matrix<T>&, const Matrix<T>&);                           \
    template Matrix<T> sub(const Matrix<T>&, const Matrix<T>&);                           \
    template Matrix<T> hadamard(const Matrix<T>&, const Matrix<T>&);                      \
    template Matrix<T> scaled(const Matrix<T>&, T);                                       \
    template void axpy(Matrix<T>&, T, const Matrix<T>&);                                  \
    template Matrix<T> slice_cols(const Matrix<T>&, std::size_t, std::size_t);            \
    template Matrix<T> slice_rows(const Matrix<T>&, std::size_t, std::size_t);            \
    template T dot(std::span<const T>, std::span<const T>);                               \
    template T l2_norm(std::span<const T>);                                               \
    template T max_abs_diff(const Matrix<T>&, const Matrix<T>&);                          \
    template bool all_finite(const Matrix<T>&);                                           \
    template T sigmoid_pow(T, T);                                                         \
    template T sigmoid_pow_grad(T, T);                                                    \
    template T gelu(T);                                                                   \
    template T gelu_grad(T);                                                              \
    template Matrix<T> rms_norm_rows(const Matrix<T>&, const Matrix<T>&, T);              \
    template Matrix<T> softmax_rows(const Matrix<T>&);

TRAJGPT_INSTANTIATE(float)
TRAJGPT_INSTANTIATE(double)

#undef TRAJGPT_INSTANTIATE

}  // namespace trajgpt
