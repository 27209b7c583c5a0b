#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "trajgpt/errors.hpp"
#include "trajgpt/inference/inference.hpp"

using namespace trajgpt;

namespace {

model::ModelConfig small_cfg() {
    model::ModelConfig c;
    c.vocab_size = 24;
    c.d = 16;
    c.heads = 2;
    c.layers = 2;
    return c;
}

struct Seq {
    std::vector<int> tokens;
    std::vector<double> times;
};

Seq random_seq(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    Seq s;
    std::uniform_int_distribution<int> tok(1, static_cast<int>(vocab) - 2);
    s.times = testutil::increasing_times(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
        s.tokens.push_back(tok(rng));
    }
    return s;
}

std::vector<double> final_probs(const model::ModelParams<float>& p, std::span<const int> tok,
                                std::span<const double> t, std::optional<double> q = std::nullopt) {
    const auto out = model::forward<float>(p, model::make_prefix_input(tok, t, q));
    return infer::softmax(out.logits.row(out.logits.rows() - 1));
}

}  // namespace

TEST_CASE("one-step forecasts agree with the full forward pass") {
    std::mt19937_64 rng(1);
    const auto p = model::init_params<float>(small_cfg(), 2);
    const auto s = random_seq(15, 24, rng);
    const auto zero = infer::time_specific_forecast<float>(p, s.tokens, s.times, std::vector<double>{s.times.back()},
                                                           ode::GapMode::history_only);
    const auto want = final_probs(p, s.tokens, s.times);
    for (std::size_t c = 0; c < want.size(); ++c) {
        CHECK(std::abs(zero.probs[0][c] - want[c]) <= 1e-6);
    }
    const auto ar = infer::autoregressive_forecast<float>(p, s.tokens, s.times, 1, 1.0);
    CHECK(ar.target_times[0] == s.times.back() + 1.0);
    CHECK(ar.predicted[0] == infer::argmax(final_probs(p, s.tokens, s.times, s.times.back() + 1.0)));
    CHECK_THROWS_AS(infer::time_specific_forecast<float>(p, s.tokens, s.times, std::vector<double>{s.times.back() - 1.0},
                                                         ode::GapMode::full),
                    ContractViolation);
    const std::vector<int> none;
    const std::vector<double> nt;
    CHECK_THROWS_AS(infer::autoregressive_forecast<float>(p, none, nt, 3), ContractViolation);
}

TEST_CASE("without decay, unit-gap time-specific rollout is auto-regressive decoding") {
    std::mt19937_64 rng(3);
    auto cfg = small_cfg();
    cfg.fixed_gamma = 1.0;
    for (std::uint64_t seed : {4u, 5u, 6u}) {
        const auto p = model::init_params<float>(cfg, seed);
        const auto s = random_seq(12, 24, rng);
        const auto ar = infer::autoregressive_forecast<float>(p, s.tokens, s.times, 8, 1.0);
        for (auto gap : {ode::GapMode::history_only, ode::GapMode::full}) {
            const auto ts = infer::time_specific_forecast<float>(p, s.tokens, s.times, ar.target_times, gap,
                                                                 infer::AbsorbMode::rollout);
            CHECK(ts.predicted == ar.predicted);
        }
    }
}

TEST_CASE("an overfit deterministic chain is reproduced by greedy decoding") {
    auto cfg = small_cfg();
    cfg.vocab_size = 12;
    auto p = model::init_params<float>(cfg, 7);
    model::Sequence chain;
    for (int i = 0; i < 30; ++i) {
        chain.tokens.push_back(1 + (i * 3) % 10);
        chain.times.push_back(50.0 + i);
    }
    model::TrainConfig tc;
    tc.warmup = 20;
    auto opt = model::AdamState<float>::zeros(p);
    const std::vector<model::Sequence> batch{chain};
    for (int i = 0; i < 400; ++i) {
        model::train_step(p, opt, std::span<const model::Sequence>(batch), tc);
    }
    const std::span<const int> tok(chain.tokens);
    const std::span<const double> tim(chain.times);
    const auto ar = infer::autoregressive_forecast<float>(p, tok.first(20), tim.first(20), 10, 1.0);
    CHECK(ar.predicted == std::vector<int>(chain.tokens.begin() + 20, chain.tokens.end()));
}

TEST_CASE("top-k recall") {
    std::vector<std::vector<double>> rows;
    std::vector<int> truth;
    for (int rank : {0, 2, 10}) {
        std::vector<double> row(20);
        for (int c = 0; c < 20; ++c) {
            row[c] = 1.0 - 0.01 * c;
        }
        rows.push_back(row);
        truth.push_back(rank);
    }
    CHECK(infer::topk_recall(rows, truth, 10) == doctest::Approx(2.0 / 3.0));
    CHECK(infer::topk_recall(rows, truth, 20) == 1.0);
    const std::vector<int> best{0, 0, 0};
    CHECK(infer::topk_recall(rows, best, 1) == 1.0);
    CHECK_THROWS_AS(infer::topk_recall(rows, truth, 21), ContractViolation);
    const std::vector<double> tie{0.2, 0.5, 0.5, 0.1};
    CHECK(infer::topk_ids(tie, 2) == std::vector<int>{1, 2});
    CHECK(infer::argmax(tie) == 1);
}

TEST_CASE("risk trajectories") {
    std::mt19937_64 rng(8);
    auto p = model::init_params<float>(small_cfg(), 9);
    const auto s = random_seq(10, 24, rng);
    const auto knots = infer::risk_trajectory<float>(p, s.tokens, s.times, 5, s.times, ode::GapMode::history_only);
    const std::span<const int> tok(s.tokens);
    const std::span<const double> tim(s.times);
    for (std::size_t i = 0; i < s.times.size(); ++i) {
        const auto want = final_probs(p, tok.first(i + 1), tim.first(i + 1));
        CHECK(std::abs(knots.risk[i] - want[5]) <= 1e-6);
    }
    REQUIRE(knots.growth.size() == knots.risk.size() - 1);
    CHECK(knots.growth[3] == doctest::Approx(knots.risk[4] - knots.risk[3]));

    // zero output head: uniform everywhere, including before the first visit
    p.head_w.fill(0.0f);
    p.head_b.fill(0.0f);
    std::vector<double> grid;
    for (int i = 0; i < 20; ++i) {
        grid.push_back(s.times.front() - 1.0 + 0.5 * i);
    }
    const auto flat = infer::risk_trajectory<float>(p, s.tokens, s.times, 7, grid, ode::GapMode::full);
    for (double r : flat.risk) {
        CHECK(r == doctest::Approx(1.0 / 24.0).epsilon(1e-6));
    }
    for (double g : flat.growth) {
        CHECK(std::abs(g) < 1e-7);
    }
    CHECK_THROWS_AS(infer::risk_trajectory<float>(p, s.tokens, s.times, 24, grid, ode::GapMode::full), ContractViolation);
}

TEST_CASE("sequence embeddings") {
    std::mt19937_64 rng(10);
    const auto p = model::init_params<float>(small_cfg(), 11);
    const auto s = random_seq(9, 24, rng);
    const std::span<const int> tok(s.tokens);
    const std::span<const double> tim(s.times);
    const auto one = infer::sequence_embedding<float>(p, s.tokens, s.times, 1);
    const auto h = model::forward<float>(p, model::make_prefix_input(tok.first(1), tim.first(1))).hidden;
    for (std::size_t j = 0; j < one.size(); ++j) {
        CHECK(one[j] == static_cast<double>(h(1, j)));
    }
    const auto four = infer::sequence_embedding<float>(p, s.tokens, s.times, 4);
    const auto h4 = model::forward<float>(p, model::make_prefix_input(tok.first(4), tim.first(4))).hidden;
    for (std::size_t j = 0; j < four.size(); ++j) {
        double m = 0.0;
        for (std::size_t r = 1; r <= 4; ++r) {
            m += h4(r, j);
        }
        CHECK(four[j] == doctest::Approx(m / 4.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(infer::sequence_embedding<float>(p, s.tokens, s.times, 0), ContractViolation);
}

TEST_CASE("nearest centroid classification") {
    const std::vector<std::pair<int, std::vector<double>>> cents{{0, {1.0, 0.0}}, {1, {0.0, 1.0}}};
    const std::vector<double> q0{1.0, 0.0};
    const auto c = infer::nearest_centroid(cents, q0);
    CHECK(c.label == 0);
    CHECK(c.score > 0.0);
    const std::vector<std::pair<int, std::vector<double>>> same{{3, {1.0, 1.0}}, {2, {1.0, 1.0}}};
    const auto t = infer::nearest_centroid(same, q0);
    CHECK(t.label == 2);
    CHECK(t.score == 0.0);

    std::mt19937_64 rng(12);
    std::normal_distribution<double> n(0.0, 0.3);
    std::vector<std::vector<double>> emb;
    std::vector<int> lab;
    for (int i = 0; i < 40; ++i) {
        const int y = i % 2;
        emb.push_back({y == 0 ? 3.0 + n(rng) : n(rng), y == 1 ? 3.0 + n(rng) : n(rng), n(rng)});
        lab.push_back(y);
    }
    const std::vector<std::vector<double>> support(emb.begin(), emb.begin() + 10);
    const std::vector<int> support_lab(lab.begin(), lab.begin() + 10);
    int correct = 0;
    for (std::size_t i = 10; i < emb.size(); ++i) {
        correct += infer::centroid_classify(support, support_lab, emb[i]).label == lab[i] ? 1 : 0;
    }
    CHECK(correct == 30);
    const std::vector<std::pair<int, std::vector<double>>> empty;
    CHECK_THROWS_AS(infer::nearest_centroid(empty, q0), ContractViolation);
    CHECK(infer::cosine(std::vector<double>{1, 0}, std::vector<double>{0, 2}) == 0.0);
}
