#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "trajgpt/errors.hpp"

namespace trajgpt {

enum class Precision { f32, f64 };

template <typename T>
constexpr Precision precision_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

/// Dense row-major matrix. Vectors are 1×n or n×1 matrices.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, "matrix data length does not match shape");
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            require(row.size() == c, "ragged initializer");
            std::size_t j = 0;
            for (T v : row) {
                m(i, j++) = v;
            }
            ++i;
        }
        return m;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = T{1};
        }
        return m;
    }

    static Matrix row_vector(std::span<const T> values) {
        return Matrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Matrix& o) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

// Kernels. Summation order is fixed (ascending inner index) so results are
// bit-reproducible for a given precision.

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);
/// a · bᵀ
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b);
/// aᵀ · b
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> scaled(const Matrix<T>& a, T s);
/// a += s·b
template <typename T>
void axpy(Matrix<T>& a, T s, const Matrix<T>& b);

template <typename T>
Matrix<T> slice_cols(const Matrix<T>& a, std::size_t begin, std::size_t end);
template <typename T>
Matrix<T> slice_rows(const Matrix<T>& a, std::size_t begin, std::size_t end);

template <typename T>
T dot(std::span<const T> a, std::span<const T> b);
template <typename T>
T l2_norm(std::span<const T> a);
template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
bool all_finite(const Matrix<T>& a);

/// σ(z)^{1/τ} with z clamped to ±50.
template <typename T>
T sigmoid_pow(T z, T tau);
/// d/dz σ(z)^{1/τ}, evaluated at the clamped input (zero outside the clamp).
template <typename T>
T sigmoid_pow_grad(T z, T tau);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

/// Row-wise RMS normalisation with per-column gain (gain is 1×cols).
template <typename T>
Matrix<T> rms_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, T eps);

/// Row-wise softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

}  // namespace trajgpt
