#include "trajgpt/numerics/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace trajgpt {

template <typename T>
Var<T> Tape<T>::leaf(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, std::span<const std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t id : inputs) {
        require(id < nodes_.size(), "tape: input refers to a later node");
        needs = needs || nodes_[id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
    return {this, nodes_.size() - 1};
}

template <typename T>
const Matrix<T>& Tape<T>::grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) {
        auto& mut = const_cast<Node&>(n);
        mut.grad = Matrix<T>(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

template <typename T>
Matrix<T>& Tape<T>::grad_mut(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) {
        n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Matrix<T>& g) {
    if (!nodes_.at(id).requires_grad) {
        return;
    }
    Matrix<T>& dst = grad_mut(id);
    require(dst.same_shape(g), "tape: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) {
        dst[i] += g[i];
    }
}

template <typename T>
void Tape<T>::backward(Var<T> output) {
    require(output.tape == this, "backward: output belongs to another tape");
    require(value(output.id).rows() == 1 && value(output.id).cols() == 1,
            "backward: output must be a scalar (1x1) node");
    grad_mut(output.id)[0] = T{1};
    for (std::size_t i = output.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) {
            n.backward(*this, i);
        }
    }
}

namespace ad {

namespace {

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
    require(a.tape != nullptr && a.tape == b.tape, "operands live on different tapes");
    return *a.tape;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a, b);
    const std::size_t ins[] = {a.id, b.id};
    return t.push(trajgpt::matmul(a.value(), b.value()), ins,
                  [ia = a.id, ib = b.id](Tape<T>& tp, std::size_t self) {
                      const Matrix<T>& g = tp.grad(self);
                      if (tp.requires_grad(ia)) {
                          tp.accumulate(ia, trajgpt::matmul_nt(g, tp.value(ib)));
                      }
                      if (tp.requires_grad(ib)) {
                          tp.accumulate(ib, trajgpt::matmul_tn(tp.value(ia), g));
                      }
                  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a, b);
    const std::size_t ins[] = {a.id, b.id};
    return t.push(trajgpt::matmul_nt(a.value(), b.value()), ins,
                  [ia = a.id, ib = b.id](Tape<T>& tp, std::size_t self) {
                      const Matrix<T>& g = tp.grad(self);
                      if (tp.requires_grad(ia)) {
                          tp.accumulate(ia, trajgpt::matmul(g, tp.value(ib)));
                      }
                      if (tp.requires_grad(ib)) {
                          tp.accumulate(ib, trajgpt::matmul_tn(g, tp.value(ia)));
                      }
                  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a, b);
    const std::size_t ins[] = {a.id, b.id};
    return t.push(trajgpt::add(a.value(), b.value()), ins,
                  [ia = a.id, ib = b.id](Tape<T>& tp, std::size_t self) {
                      const Matrix<T> g = tp.grad(self);
                      tp.accumulate(ia, g);
                      tp.accumulate(ib, g);
                  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a, b);
    const std::size_t ins[] = {a.id, b.id};
    return t.push(trajgpt::sub(a.value(), b.value()), ins,
                  [ia = a.id, ib = b.id](Tape<T>& tp, std::size_t self) {
                      const Matrix<T> g = tp.grad(self);
                      tp.accumulate(ia, g);
                      tp.accumulate(ib, scaled(g, T{-1}));
                  });
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
    Tape<T>& t = tape_of(a, b);
    const std::size_t ins[] = {a.id, b.id};
    return t.push(trajgpt::hadamard(a.value(), b.value()), ins,
                  [ia = a.id, ib = b.id](Tape<T>& tp, std::size_t self) {
                      const Matrix<T>& g = tp.grad(self);
                      if (tp.requires_grad(ia)) {
                          tp.accumulate(ia, trajgpt::hadamard(g, tp.value(ib)));
                      }
                      if (tp.requires_grad(ib)) {
                          tp.accumulate(ib, trajgpt::hadamard(g, tp.value(ia)));
                      }
                  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    const std::size_t ins[] = {a.id};
    return a.tape->push(scaled(a.value(), s), ins, [ia = a.id, s](Tape<T>& tp, std::size_t self) {
        tp.accumulate(ia, scaled(tp.grad(self), s));
    });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
    Tape<T>& t = tape_of(a, bias);
    require(bias.rows() == 1 && bias.cols() == a.cols(), "add_row: bias shape mismatch");
    Matrix<T> out = a.value();
    const Matrix<T>& b = bias.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (std::size_t j = 0; j < out.cols(); ++j) {
            out(i, j) += b[j];
        }
    }
    const std::size_t ins[] = {a.id, bias.id};
    return t.push(std::move(out), ins, [ia = a.id, ib = bias.id](Tape<T>& tp, std::size_t self) {
        const Matrix<T> g = tp.grad(self);
        tp.accumulate(ia, g);
        if (tp.requires_grad(ib)) {
            Matrix<T> gb(1, g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i) {
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    gb[j] += g(i, j);
                }
            }
            tp.accumulate(ib, gb);
        }
    });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    Matrix<T> out = a.value();
    for (auto& v : out.storage()) {
        v = trajgpt::gelu(v);
    }
    const std::size_t ins[] = {a.id};
    return a.tape->push(std::move(out), ins, [ia = a.id](Tape<T>& tp, std::size_t self) {
        Matrix<T> g = tp.grad(self);
        const Matrix<T>& x = tp.value(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] *= gelu_grad(x[i]);
        }
        tp.accumulate(ia, g);
    });
}

template <typename T>
Var<T> sigmoid_pow(Var<T> a, T tau) {
    Matrix<T> out = a.value();
    for (auto& v : out.storage()) {
        v = trajgpt::sigmoid_pow(v, tau);
    }
    const std::size_t ins[] = {a.id};
    return a.tape->push(std::move(out), ins, [ia = a.id, tau](Tape<T>& tp, std::size_t self) {
        Matrix<T> g = tp.grad(self);
        const Matrix<T>& z = tp.value(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] *= sigmoid_pow_grad(z[i], tau);
        }
        tp.accumulate(ia, g);
    });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, T eps) {
    Tape<T>& t = tape_of(x, gain);
    const std::size_t ins[] = {x.id, gain.id};
    return t.push(rms_norm_rows(x.value(), gain.value(), eps), ins,
                  [ix = x.id, ig = gain.id, eps](Tape<T>& tp, std::size_t self) {
                      const Matrix<T>& g = tp.grad(self);
                      const Matrix<T>& xv = tp.value(ix);
                      const Matrix<T>& gv = tp.value(ig);
                      const std::size_t n = xv.rows();
                      const std::size_t c = xv.cols();
                      Matrix<T> gx(n, c);
                      Matrix<T> gg(1, c);
                      for (std::size_t i = 0; i < n; ++i) {
                          T ms{0};
                          for (std::size_t j = 0; j < c; ++j) {
                              ms += xv(i, j) * xv(i, j);
                          }
                          const T inv = T{1} / std::sqrt(ms / T(c) + eps);
                          // y_j = x_j·inv·g_j; dy/dx_k = inv·g_k·δ_jk − x_j·g_j·inv³·x_k / c
                          T proj{0};
                          for (std::size_t j = 0; j < c; ++j) {
                              proj += g(i, j) * gv[j] * xv(i, j);
                              gg[j] += g(i, j) * xv(i, j) * inv;
                          }
                          const T coef = proj * inv * inv * inv / T(c);
                          for (std::size_t j = 0; j < c; ++j) {
                              gx(i, j) = g(i, j) * gv[j] * inv - xv(i, j) * coef;
                          }
                      }
                      tp.accumulate(ix, gx);
                      tp.accumulate(ig, gg);
                  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
    const std::size_t ins[] = {a.id};
    return a.tape->push(trajgpt::slice_cols(a.value(), begin, end), ins,
                        [ia = a.id, begin](Tape<T>& tp, std::size_t self) {
                            if (!tp.requires_grad(ia)) {
                                return;
                            }
                            const Matrix<T>& g = tp.grad(self);
                            Matrix<T>& dst = tp.grad_mut(ia);
                            for (std::size_t i = 0; i < g.rows(); ++i) {
                                for (std::size_t j = 0; j < g.cols(); ++j) {
                                    dst(i, begin + j) += g(i, j);
                                }
                            }
                        });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    require(!parts.empty(), "concat_cols: no parts");
    Tape<T>& t = *parts[0].tape;
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        require(p.tape == &t && p.rows() == rows, "concat_cols: row mismatch");
        ids.push_back(p.id);
        offsets.push_back(cols);
        cols += p.cols();
    }
    Matrix<T> out(rows, cols);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Matrix<T>& v = parts[k].value();
        for (std::size_t i = 0; i < rows; ++i) {
            std::copy(v.row(i).begin(), v.row(i).end(), out.data() + i * cols + offsets[k]);
        }
    }
    return t.push(std::move(out), ids, [ids, offsets](Tape<T>& tp, std::size_t self) {
        const Matrix<T>& g = tp.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.requires_grad(ids[k])) {
                continue;
            }
            Matrix<T>& dst = tp.grad_mut(ids[k]);
            for (std::size_t i = 0; i < dst.rows(); ++i) {
                for (std::size_t j = 0; j < dst.cols(); ++j) {
                    dst(i, j) += g(i, offsets[k] + j);
                }
            }
        }
    });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
    const Matrix<T>& tv = table.value();
    Matrix<T> out(ids.size(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < tv.rows(),
                "gather_rows: id " + std::to_string(ids[i]) + " out of range");
        std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(i).begin());
    }
    const std::size_t ins[] = {table.id};
    return table.tape->push(std::move(out), ins,
                            [it = table.id, rows = std::vector<int>(ids.begin(), ids.end())](
                                Tape<T>& tp, std::size_t self) {
                                const Matrix<T>& g = tp.grad(self);
                                Matrix<T>& dst = tp.grad_mut(it);
                                for (std::size_t i = 0; i < rows.size(); ++i) {
                                    for (std::size_t j = 0; j < g.cols(); ++j) {
                                        dst(rows[i], j) += g(i, j);
                                    }
                                }
                            });
}

template <typename T>
Var<T> causal_softmax(Var<T> scores) {
    const Matrix<T>& s = scores.value();
    require(s.rows() == s.cols(), "causal_softmax: scores must be square");
    const std::size_t n = s.rows();
    Matrix<T> p(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
            mx = std::max(mx, s(i, j));
        }
        T z{0};
        for (std::size_t j = 0; j <= i; ++j) {
            p(i, j) = std::exp(s(i, j) - mx);
            z += p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
            p(i, j) /= z;
        }
    }
    const std::size_t ins[] = {scores.id};
    return scores.tape->push(std::move(p), ins, [is = scores.id](Tape<T>& tp, std::size_t self) {
        const Matrix<T>& g = tp.grad(self);
        const Matrix<T>& pv = tp.value(self);
        const std::size_t n = pv.rows();
        Matrix<T> gs(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            T inner{0};
            for (std::size_t j = 0; j <= i; ++j) {
                inner += g(i, j) * pv(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) {
                gs(i, j) = pv(i, j) * (g(i, j) - inner);
            }
        }
        tp.accumulate(is, gs);
    });
}

template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, std::span<const int> targets, int ignore_id) {
    const Matrix<T>& lv = logits.value();
    require(targets.size() == lv.rows(), "cross_entropy: target count does not match logits rows");
    Matrix<T> probs = softmax_rows(lv);
    T total{0};
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == ignore_id) {
            continue;
        }
        require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < lv.cols(),
                "cross_entropy: target id out of range");
        const auto row = lv.row(i);
        const T mx = *std::max_element(row.begin(), row.end());
        T z{0};
        for (T v : row) {
            z += std::exp(v - mx);
        }
        total += std::log(z) + mx - row[targets[i]];
    }
    const std::size_t ins[] = {logits.id};
    return logits.tape->push(
        Matrix<T>(1, 1, total), ins,
        [il = logits.id, probs = std::move(probs),
         tg = std::vector<int>(targets.begin(), targets.end()), ignore_id](Tape<T>& tp,
                                                                          std::size_t self) {
            const T g = tp.grad(self)[0];
            Matrix<T> gl(probs.rows(), probs.cols());
            for (std::size_t i = 0; i < tg.size(); ++i) {
                if (tg[i] == ignore_id) {
                    continue;
                }
                for (std::size_t j = 0; j < probs.cols(); ++j) {
                    gl(i, j) = g * probs(i, j);
                }
                gl(i, tg[i]) -= g;
            }
            tp.accumulate(il, gl);
        });
}

template <typename T>
Var<T> sum(Var<T> a) {
    T total{0};
    for (T v : a.value().storage()) {
        total += v;
    }
    const std::size_t ins[] = {a.id};
    return a.tape->push(Matrix<T>(1, 1, total), ins, [ia = a.id](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(self)[0];
        const Matrix<T>& x = tp.value(ia);
        tp.accumulate(ia, Matrix<T>(x.rows(), x.cols(), g));
    });
}

#define TRAJGPT_INSTANTIATE_AD(T)                                                   \
    template Var<T> matmul(Var<T>, Var<T>);                                         \
    template Var<T> matmul_nt(Var<T>, Var<T>);                                      \
    template Var<T> add(Var<T>, Var<T>);                                            \
    template Var<T> sub(Var<T>, Var<T>);                                            \
    template Var<T> hadamard(Var<T>, Var<T>);                                       \
    template Var<T> scale(Var<T>, T);                                               \
    template Var<T> add_row(Var<T>, Var<T>);                                        \
    template Var<T> gelu(Var<T>);                                                   \
    template Var<T> sigmoid_pow(Var<T>, T);                                         \
    template Var<T> rms_norm(Var<T>, Var<T>, T);                                    \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                   \
    template Var<T> concat_cols(std::span<const Var<T>>);                           \
    template Var<T> gather_rows(Var<T>, std::span<const int>);                      \
    template Var<T> causal_softmax(Var<T>);                                         \
    template Var<T> cross_entropy_sum(Var<T>, std::span<const int>, int);           \
    template Var<T> sum(Var<T>);

TRAJGPT_INSTANTIATE_AD(float)
TRAJGPT_INSTANTIATE_AD(double)

#undef TRAJGPT_INSTANTIATE_AD

}  // namespace ad

template class Tape<float>;
template class Tape<double>;

}  // namespace trajgpt
