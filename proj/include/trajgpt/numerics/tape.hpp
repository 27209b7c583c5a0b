#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "trajgpt/numerics/matrix.hpp"

namespace trajgpt {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Matrix<T>& value() const { return tape->value(id); }
    const Matrix<T>& grad() const { return tape->grad(id); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted; backward() walks it in
/// reverse. A tape is single-use: build, call backward once, read gradients.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    /// Differentiable input (a parameter).
    Var<T> leaf(Matrix<T> value);
    /// Non-differentiable input.
    Var<T> constant(Matrix<T> value);

    /// Appends the result of a primitive. `fn` is dropped when none of the
    /// inputs needs a gradient.
    Var<T> push(Matrix<T> value, std::span<const std::size_t> inputs, BackwardFn fn);

    const Matrix<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    /// Adjoint of a node; a zero matrix until backward() reaches it.
    const Matrix<T>& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    /// Adds `g` into the adjoint of `id` (no-op for constants).
    void accumulate(std::size_t id, const Matrix<T>& g);
    /// Mutable adjoint, allocated on first use. Only valid for nodes that require grad.
    Matrix<T>& grad_mut(std::size_t id);

    void backward(Var<T> output);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    mutable Matrix<T> zero_scratch_;
};

namespace ad {

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
/// a · bᵀ
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
/// Adds a 1×cols bias to every row.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T>
Var<T> gelu(Var<T> a);
template <typename T>
Var<T> sigmoid_pow(Var<T> a, T tau);
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps);
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);
/// Row lookup into an embedding table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids);
/// Row-wise softmax restricted to the causal (lower-triangular) part.
template <typename T>
Var<T> causal_softmax(Var<T> scores);
/// Σ −log softmax(logits_n)[target_n] over rows whose target ≠ ignore_id. Result is 1×1.
template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, std::span<const int> targets, int ignore_id);
template <typename T>
Var<T> sum(Var<T> a);

}  // namespace ad

}  // namespace trajgpt
