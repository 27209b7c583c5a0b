#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "trajgpt/errors.hpp"
#include "trajgpt/numerics/gradcheck.hpp"
#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/numerics/tape.hpp"
#include "trajgpt/positional/rope.hpp"

using namespace trajgpt;

TEST_CASE("matmul identity, zero and a hand product") {
    std::mt19937_64 rng(1);
    const auto m = testutil::random_matrix<double>(3, 4, rng);
    CHECK(matmul(Matrix<double>::identity(3), m) == m);
    const auto z = matmul(Matrix<double>(2, 2), testutil::random_matrix<double>(2, 3, rng));
    for (std::size_t i = 0; i < z.size(); ++i) {
        CHECK(z[i] == 0.0);
    }
    const auto p = matmul(Matrix<double>::from_rows({{1, 2}, {3, 4}}), Matrix<double>::from_rows({{5}, {6}}));
    CHECK(p == Matrix<double>::from_rows({{17}, {39}}));
    CHECK_THROWS_AS(matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), ContractViolation);
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposes") {
    std::mt19937_64 rng(2);
    const auto a = testutil::random_matrix<double>(3, 5, rng);
    const auto b = testutil::random_matrix<double>(4, 5, rng);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-14);
    const auto c = testutil::random_matrix<double>(3, 2, rng);
    CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-14);
}

TEST_CASE("tempered sigmoid gate") {
    CHECK(sigmoid_pow(0.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sigmoid_pow(0.0, 20.0) == doctest::Approx(std::pow(0.5, 1.0 / 20.0)).epsilon(1e-14));
    CHECK(sigmoid_pow(0.0, 20.0) == doctest::Approx(0.965936).epsilon(1e-6));
    CHECK(sigmoid_pow(800.0, 20.0) == 1.0);
    CHECK(sigmoid_pow(-800.0, 20.0) >= 0.0);
    // derivative against a central difference
    for (double z : {-3.0, -0.2, 0.0, 1.7}) {
        const double h = 1e-6;
        const double fd = (sigmoid_pow(z + h, 20.0) - sigmoid_pow(z - h, 20.0)) / (2 * h);
        CHECK(sigmoid_pow_grad(z, 20.0) == doctest::Approx(fd).epsilon(1e-7));
    }
}

TEST_CASE("tape: x^2, constants and non-scalar outputs") {
    Tape<double> tape;
    auto x = tape.leaf(Matrix<double>::from_rows({{3.0}}));
    auto y = ad::hadamard(x, x);
    tape.backward(y);
    CHECK(x.grad()(0, 0) == 6.0);

    Tape<double> t2;
    auto a = t2.leaf(Matrix<double>::from_rows({{1.0, 2.0}}));
    auto c = t2.constant(Matrix<double>::from_rows({{5.0}}));
    auto z = ad::add(ad::scale(ad::sum(a), 0.0), c);
    t2.backward(z);
    CHECK(a.grad()(0, 0) == 0.0);
    CHECK(a.grad()(0, 1) == 0.0);

    Tape<double> t3;
    auto v = t3.leaf(Matrix<double>(2, 2, 1.0));
    CHECK_THROWS_AS(t3.backward(v), ContractViolation);
}

TEST_CASE("tape: gradients of sum((QK^T . D)V) match central differences") {
    std::mt19937_64 rng(3);
    const auto q0 = testutil::random_matrix<double>(4, 4, rng);
    const auto k0 = testutil::random_matrix<double>(4, 4, rng);
    const auto v0 = testutil::random_matrix<double>(4, 4, rng);
    std::uniform_real_distribution<double> u(0.3, 0.99);
    Matrix<double> g0m(4, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        g0m[i] = u(rng);
    }
    const Matrix<double> g0 = g0m;
    auto eval = [&](const Matrix<double>& q, const Matrix<double>& k, const Matrix<double>& v,
                    const Matrix<double>& g, bool grads) {
        Tape<double> tape;
        auto vq = tape.leaf(q), vk = tape.leaf(k), vv = tape.leaf(v), vg = tape.leaf(g);
        auto d = ad::decay_matrix(vg);
        auto out = ad::sum(ad::matmul(ad::hadamard(ad::matmul_nt(vq, vk), d), vv));
        const double f = out.value()(0, 0);
        std::vector<double> gr;
        if (grads) {
            tape.backward(out);
            for (auto* var : {&vq, &vk, &vv, &vg}) {
                gr.insert(gr.end(), var->grad().storage().begin(), var->grad().storage().end());
            }
        }
        return std::make_pair(f, gr);
    };
    std::vector<double> flat;
    for (const auto* m : {&q0, &k0, &v0, &g0}) {
        flat.insert(flat.end(), m->storage().begin(), m->storage().end());
    }
    auto unflat = [&](std::span<const double> p) {
        auto take = [&](std::size_t off, std::size_t r, std::size_t c) {
            return Matrix<double>(r, c, std::vector<double>(p.begin() + off, p.begin() + off + r * c));
        };
        return eval(take(0, 4, 4), take(16, 4, 4), take(32, 4, 4), take(48, 4, 1), false).first;
    };
    const auto analytic = eval(q0, k0, v0, g0, true).second;
    CHECK(finite_diff_check(unflat, flat, analytic, 1e-6) < 1e-4);
}

TEST_CASE("finite difference checker") {
    std::vector<double> p{0.3, -1.2};
    auto lin = [](std::span<const double> x) { return 2.0 * x[0] - 5.0 * x[1] + 1.0; };
    std::vector<double> g{2.0, -5.0};
    CHECK(finite_diff_check(lin, p, g, 1e-3) < 1e-10);
    std::vector<double> one{1.0};
    std::vector<double> three{3.0};
    auto cube = [](std::span<const double> x) { return x[0] * x[0] * x[0]; };
    CHECK(finite_diff_check(cube, one, three, 1e-4) <= 1e-6);
    auto bad = [](std::span<const double>) { return std::numeric_limits<double>::quiet_NaN(); };
    CHECK_THROWS_AS(finite_diff_check(bad, one, three, 1e-4), ContractViolation);
}

TEST_CASE("cross entropy on hand cases") {
    Tape<double> tape;
    auto logits = tape.leaf(Matrix<double>::from_rows({{1.0, 0.0}}));
    const std::vector<int> target{0};
    auto loss = ad::cross_entropy_sum(logits, std::span<const int>(target), -1);
    CHECK(loss.value()(0, 0) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
    CHECK(loss.value()(0, 0) == doctest::Approx(0.3133).epsilon(1e-4));
}

TEST_CASE("rope rotation") {
    RopeConfig cfg{2, 10000.0, M_PI / 2};
    const std::vector<double> e1{1.0, 0.0};
    const auto r = rope_rotate<double>(e1, 1.0, cfg);
    CHECK(r[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(r[1] == doctest::Approx(1.0).epsilon(1e-15));
    RopeConfig c8{8};
    std::mt19937_64 rng(4);
    const auto v = testutil::random_matrix<double>(1, 8, rng);
    CHECK(rope_rotate<double>(v.row(0), 0.0, c8) == std::vector<double>(v.storage()));
    const auto rv = rope_rotate<double>(v.row(0), 37.25, c8);
    CHECK(l2_norm<double>(rv) == doctest::Approx(l2_norm<double>(v.row(0))).epsilon(1e-12));
    const std::vector<double> odd{1.0, 2.0, 3.0};
    RopeConfig c3{3};
    CHECK_THROWS_AS(rope_rotate<double>(odd, 1.0, c3), ContractViolation);
}

TEST_CASE("rope inner products depend on time differences only") {
    std::mt19937_64 rng(5);
    RopeConfig cfg{8, 10000.0, 1.0};
    const auto q = testutil::random_matrix<double>(2, 8, rng);
    const auto k = testutil::random_matrix<double>(2, 8, rng);
    auto inner = [&](double tn, double tm) {
        const std::vector<double> t{tn, tm};
        auto [rq, rk] = rope_apply(q, k, t, cfg);
        return dot<double>(rq.row(0), rk.row(1));
    };
    CHECK(std::abs(inner(3.0, 1.0) - inner(7.0, 5.0)) < 1e-10);
    CHECK(std::abs(inner(2.0, 2.0) - dot<double>(q.row(0), k.row(1))) < 1e-12);

    const auto qs = testutil::random_matrix<double>(5, 8, rng);
    const auto ks = testutil::random_matrix<double>(5, 8, rng);
    const auto t = testutil::increasing_times(5, rng);
    std::vector<double> shifted(t);
    for (auto& v : shifted) {
        v += 12.5;
    }
    auto [a1, b1] = rope_apply(qs, ks, t, cfg);
    auto [a2, b2] = rope_apply(qs, ks, shifted, cfg);
    CHECK(max_abs_diff(matmul_nt(a1, b1), matmul_nt(a2, b2)) < 1e-10);
    const std::vector<double> short_t{1.0};
    CHECK_THROWS_AS(rope_apply(qs, ks, short_t, cfg), ContractViolation);
}
