#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "trajgpt/errors.hpp"
#include "trajgpt/odebridge/odebridge.hpp"

using namespace trajgpt;

namespace {

sra::State<double> random_state(std::size_t dh, std::mt19937_64& rng) {
    auto st = sra::State<double>::zero(dh);
    for (int i = 0; i < 3; ++i) {
        const auto q = testutil::random_matrix<double>(1, dh, rng);
        const auto k = testutil::random_matrix<double>(1, dh, rng);
        const auto v = testutil::random_matrix<double>(1, dh, rng);
        std::vector<double> out(dh);
        st.absorb(q.row(0), k.row(0), v.row(0), 0.8, static_cast<double>(i), out);
    }
    return st;
}

}  // namespace

TEST_CASE("zoh lift by hand") {
    const std::vector<double> k{0.5, -2.0};
    const std::vector<double> q{1.0, 3.0};
    const auto one = ode::zoh_lift(1.0, k, q, 2.0);
    CHECK(one.a[0] == 0.0);
    CHECK(one.b(0, 0) == 0.25);
    CHECK(one.b(1, 0) == -1.0);
    CHECK(one.c == q);
    const auto half = ode::zoh_lift(0.5, k, q, 1.0);
    CHECK(half.a[1] == doctest::Approx(-0.693147).epsilon(1e-6));
    CHECK_THROWS_AS(ode::zoh_lift(0.0, k, q, 1.0), ContractViolation);
    CHECK_THROWS_AS(ode::zoh_lift(-0.1, k, q, 1.0), ContractViolation);
}

TEST_CASE("zoh discretisation limits") {
    ode::ContinuousParams cp;
    cp.a = {0.0, 0.0};
    cp.b = Matrix<double>::from_rows({{2.0}, {-1.0}});
    cp.c = {1.0, 1.0};
    cp.delta = 0.5;
    auto dp = ode::zoh_discretize(cp);
    CHECK(dp.a_bar[0] == 1.0);
    CHECK(dp.b_bar(0, 0) == 1.0);
    CHECK(dp.b_bar(1, 0) == -0.5);
    cp.a = {-0.3, -2.0};
    cp.delta = 1e-12;
    dp = ode::zoh_discretize(cp);
    CHECK(dp.a_bar[1] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(dp.b_bar(0, 0)) < 1e-10);
}

TEST_CASE("zoh round trip recovers the discrete step") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> ug(0.01, 1.0);
    std::vector<double> gammas{0.01, 0.5, 0.999999, 1.0};
    for (int i = 0; i < 200; ++i) {
        gammas.push_back(ug(rng));
    }
    double worst = 0.0;
    for (double g : gammas) {
        for (double delta : {0.25, 1.0, 3.0}) {
            const auto k = testutil::random_matrix<double>(1, 4, rng);
            const auto q = testutil::random_matrix<double>(1, 4, rng);
            const auto dp = ode::zoh_discretize(ode::zoh_lift(g, k.row(0), q.row(0), delta));
            for (std::size_t j = 0; j < 4; ++j) {
                worst = std::max(worst, std::abs(dp.a_bar[j] - g));
                worst = std::max(worst, std::abs(dp.b_bar(j, 0) - k(0, j)));
            }
        }
    }
    CHECK(worst <= 1e-8);
}

TEST_CASE("unrolled ssm matches the recurrent form") {
    std::mt19937_64 rng(2);
    for (std::size_t heads : {1u, 2u, 4u}) {
        const auto p = testutil::random_sra<double>(8, heads, rng);
        const auto x = testutil::random_matrix<double>(20, 8, rng);
        const auto t = testutil::increasing_times(20, rng);
        for (double delta : {1.0, 0.37}) {
            CHECK(max_abs_diff(ode::unrolled_ssm_forward(x, t, p, delta), sra::recurrent_forward<double>(x, t, p)) <= 1e-10);
        }
    }
}

TEST_CASE("gap decay") {
    std::mt19937_64 rng(3);
    const auto st = random_state(3, rng);
    for (auto mode : {ode::GapMode::full, ode::GapMode::history_only}) {
        CHECK(ode::gap_decay(st, 0.7, 0.0, mode).s == st.s);
        CHECK(ode::gap_decay(st, 1.0, 5.0, mode).s == st.s);
        CHECK_THROWS_AS(ode::gap_decay(st, 0.7, -0.1, mode), ContractViolation);
    }
    const auto full = ode::gap_decay(st, 0.9, 2.0, ode::GapMode::full);
    for (std::size_t i = 0; i < st.s.size(); ++i) {
        CHECK(full.s[i] == doctest::Approx(0.81 * st.s[i]).epsilon(1e-13));
    }
    const auto hist = ode::gap_decay(st, 0.9, 2.0, ode::GapMode::history_only);
    for (std::size_t i = 0; i < st.s.size(); ++i) {
        CHECK(hist.s[i] == doctest::Approx(0.81 * st.history[i] + st.last_kv[i]).epsilon(1e-13));
    }
    // two gaps compose into one
    for (auto mode : {ode::GapMode::full, ode::GapMode::history_only}) {
        const auto two = ode::gap_decay(ode::gap_decay(st, 0.85, 0.7, mode), 0.85, 1.6, mode);
        const auto one = ode::gap_decay(st, 0.85, 2.3, mode);
        CHECK(max_abs_diff(two.s, one.s) < 1e-13);
    }
    CHECK(ode::gap_mode_from_string("history") == ode::GapMode::history_only);
    CHECK(ode::gap_mode_from_string("full") == ode::GapMode::full);
    CHECK_THROWS_AS(ode::gap_mode_from_string("sideways"), ContractViolation);
}

TEST_CASE("time-specific output at zero gap is the last recurrent output") {
    std::mt19937_64 rng(4);
    const std::size_t d = 8, heads = 2, dh = 4, n = 9;
    const auto p = testutil::random_sra<double>(d, heads, rng);
    const auto x = testutil::random_matrix<double>(n, d, rng);
    const auto t = testutil::increasing_times(n, rng);
    const auto proj = sra::project<double>(x, t, t, p);
    std::vector<sra::State<double>> states(heads, sra::State<double>::zero(dh));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> out(dh);
            states[h].absorb(proj.q.row(i).subspan(h * dh, dh), proj.k.row(i).subspan(h * dh, dh),
                             proj.v.row(i).subspan(h * dh, dh), proj.gammas(i, h), t[i], out);
        }
    }
    const auto heads_out = sra::head_outputs<double>(x, t, t, p, sra::Form::recurrent);
    for (auto mode : {ode::GapMode::full, ode::GapMode::history_only}) {
        const auto o = ode::time_specific_output<double>(states, x.row(n - 1), p, t[n - 1], mode);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < dh; ++j) {
                CHECK(o[h * dh + j] == heads_out[h](n - 1, j));
            }
        }
        CHECK_THROWS_AS(ode::time_specific_output<double>(states, x.row(n - 1), p, t[n - 1] - 0.5, mode),
                        ContractViolation);
    }
}
