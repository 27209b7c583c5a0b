#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "trajgpt/cli/pipeline.hpp"
#include "trajgpt/errors.hpp"
#include "trajgpt/numerics/gradcheck.hpp"
#include "trajgpt/model/model.hpp"

using namespace trajgpt;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny(std::size_t vocab = 20, std::size_t d = 8, std::size_t heads = 2, std::size_t layers = 1) {
    model::ModelConfig c;
    c.vocab_size = vocab;
    c.d = d;
    c.heads = heads;
    c.layers = layers;
    return c;
}

model::Sequence random_seq(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    model::Sequence s;
    std::uniform_int_distribution<int> tok(1, static_cast<int>(vocab) - 2);
    s.times = testutil::increasing_times(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
        s.tokens.push_back(tok(rng));
    }
    return s;
}

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("trajgpt_unit_" + name)).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void put_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

template <typename T>
bool same_params(const model::ModelParams<T>& a, const model::ModelParams<T>& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    if (ta.size() != tb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].first != tb[i].first || !(*ta[i].second == *tb[i].second)) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("embedding lookup") {
    Tape<double> tape;
    auto table = tape.leaf(Matrix<double>::identity(3));
    const std::vector<int> ids{2, 0, 1, 2};
    auto rows = ad::gather_rows(table, std::span<const int>(ids));
    CHECK(rows.value() == Matrix<double>::from_rows({{0, 0, 1}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    const std::vector<int> bad{3};
    CHECK_THROWS_AS(ad::gather_rows(table, std::span<const int>(bad)), ContractViolation);

    const auto p = model::init_params<float>(tiny(), 1);
    for (std::size_t r = 0; r < p.embedding.rows(); ++r) {
        CHECK(std::isfinite(l2_norm<float>(p.embedding.row(r))));
    }
}

TEST_CASE("forward shape, causality and form equivalence") {
    std::mt19937_64 rng(2);
    const auto p = model::init_params<float>(tiny(30, 16, 4, 2), 3);
    const std::vector<int> one{5};
    const std::vector<double> t1{40.0};
    const auto l1 = model::forward<float>(p, one, t1);
    CHECK(l1.rows() == 1);
    CHECK(l1.cols() == 30);
    CHECK(all_finite(l1));

    auto s = random_seq(20, 30, rng);
    const auto base = model::forward<float>(p, s.tokens, s.times);
    auto pert = s.tokens;
    pert[12] = pert[12] == 3 ? 4 : 3;
    const auto changed = model::forward<float>(p, pert, s.times);
    CHECK(slice_rows(changed, 0, 12) == slice_rows(base, 0, 12));
    CHECK(max_abs_diff(slice_rows(changed, 12, 13), slice_rows(base, 12, 13)) > 0.0f);

    const auto par = model::forward<float>(p, s.tokens, s.times, sra::Form::parallel);
    CHECK(max_abs_diff(par, base) <= 1e-5f);

    auto back = s.times;
    back[5] = back[4] - 0.1;
    CHECK_THROWS_AS(model::forward<float>(p, s.tokens, back), ContractViolation);
    const std::vector<int> oob{30};
    CHECK_THROWS_AS(model::forward<float>(p, oob, t1), ContractViolation);
}

TEST_CASE("negative log likelihood") {
    Matrix<double> uniform(3, 194, 0.25);
    const std::vector<int> tg{1, 7, 193};
    CHECK(model::nll_loss<double>(uniform, tg) == doctest::Approx(std::log(194.0)).epsilon(1e-13));
    CHECK(std::log(194.0) == doctest::Approx(5.268).epsilon(1e-4));
    Matrix<double> sharp(1, 3, 0.0);
    sharp(0, 1) = 800.0;
    const std::vector<int> t1{1};
    CHECK(model::nll_loss<double>(sharp, t1) < 1e-300);
    const auto two = Matrix<double>::from_rows({{1.0, 0.0}});
    const std::vector<int> t0{0};
    CHECK(model::nll_loss<double>(two, t0) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
    const std::vector<int> wrong{0, 1};
    CHECK_THROWS_AS(model::nll_loss<double>(two, wrong), ContractViolation);
    const std::vector<int> ignored{-1};
    CHECK_THROWS_AS(model::nll_loss<double>(two, ignored, -1), ContractViolation);
}

TEST_CASE("training example shifts right behind [SOS]") {
    const std::vector<int> tok{4, 9, 2};
    const std::vector<double> t{1.0, 2.5, 4.0};
    const auto ex = model::make_training_example(tok, t);
    CHECK(ex.input.tokens == std::vector<int>{model::kSosId, 4, 9});
    CHECK(ex.targets == tok);
    CHECK(ex.input.key_times == std::vector<double>{1.0, 1.0, 2.5});
    CHECK(ex.input.query_times == t);
    const auto pre = model::make_prefix_input(tok, t, 6.0);
    CHECK(pre.tokens == std::vector<int>{model::kSosId, 4, 9, 2});
    CHECK(pre.query_times == std::vector<double>{1.0, 2.5, 4.0, 6.0});
    CHECK_THROWS_AS(model::make_prefix_input(tok, t, 3.0), ContractViolation);
}

TEST_CASE("full model gradients match central differences") {
    std::mt19937_64 rng(4);
    auto cfg = tiny(12, 8, 2, 1);
    cfg.precision = Precision::f64;
    for (bool fixed : {false, true}) {
        auto c = cfg;
        if (fixed) {
            c.fixed_gamma = 0.9;
        }
        auto p = model::init_params<double>(c, 5);
        const std::vector<model::Sequence> batch{random_seq(6, 12, rng)};
        const auto lg = model::loss_and_grad<double>(p, batch);
        std::vector<double> flat, analytic;
        for (std::size_t i = 0; i < p.tensors().size(); ++i) {
            const auto* m = p.tensors()[i].second;
            flat.insert(flat.end(), m->storage().begin(), m->storage().end());
            analytic.insert(analytic.end(), lg.grads[i].storage().begin(), lg.grads[i].storage().end());
        }
        auto f = [&](std::span<const double> q) {
            auto pp = p;
            std::size_t off = 0;
            for (auto& [name, m] : pp.tensors()) {
                std::copy(q.begin() + off, q.begin() + off + m->size(), m->storage().begin());
                off += m->size();
            }
            return static_cast<double>(model::loss_and_grad<double>(pp, batch).loss);
        };
        CHECK(finite_diff_check(f, flat, analytic, 1e-5) <= 1e-4);
    }
}

TEST_CASE("training: zero learning rate, overfitting and failure diagnostics") {
    std::mt19937_64 rng(6);
    auto cfg = tiny(20, 16, 2, 2);
    auto p = model::init_params<float>(cfg, 7);
    const auto before = p;
    model::TrainConfig tc;
    tc.lr = 0.0;
    tc.warmup = 0;
    auto opt = model::AdamState<float>::zeros(p);
    const std::vector<model::Sequence> one{random_seq(16, 20, rng)};
    model::train_step(p, opt, std::span<const model::Sequence>(one), tc);
    CHECK(same_params(p, before));

    tc.lr = 3e-3;
    tc.warmup = 20;
    tc.steps = 500;
    float loss = 0.0f;
    for (std::size_t i = 0; i < 500; ++i) {
        loss = model::train_step(p, opt, std::span<const model::Sequence>(one), tc);
    }
    CHECK(static_cast<double>(model::evaluate_loss(p, std::span<const model::Sequence>(one))) < 0.05);
    CHECK(loss < 0.1f);

    auto broken = p;
    broken.embedding(one[0].tokens[0], 0) = std::numeric_limits<float>::quiet_NaN();
    auto opt2 = model::AdamState<float>::zeros(broken);
    try {
        model::train_step(broken, opt2, std::span<const model::Sequence>(one), tc);
        FAIL("expected a numeric failure");
    } catch (const NumericFailure& e) {
        CHECK(std::string(e.what()).find("embedding") != std::string::npos);
    }
}

TEST_CASE("batches are a pure function of seed and step") {
    std::mt19937_64 rng(8);
    std::vector<model::Sequence> data;
    for (int i = 0; i < 30; ++i) {
        data.push_back(random_seq(10 + i * 3, 20, rng));
    }
    model::TrainConfig tc;
    tc.max_len = 32;
    const auto a = model::select_batch(data, tc, 17);
    const auto b = model::select_batch(data, tc, 17);
    REQUIRE(a.size() == tc.batch_size);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].tokens.size() <= 32);
    }
    CHECK(model::learning_rate(tc, 1) == doctest::Approx(tc.lr / tc.warmup));
    CHECK(model::learning_rate(tc, tc.warmup + 50) == tc.lr);
}

TEST_CASE("checkpoint round trip and rejections") {
    std::mt19937_64 rng(9);
    auto cfg = tiny(20, 8, 2, 2);
    model::TrainConfig tc;
    tc.seed = 11;
    auto ck = cli::initial_checkpoint<float>(cfg, tc);
    std::vector<model::Sequence> data{random_seq(12, 20, rng), random_seq(9, 20, rng)};
    cli::pretrain(ck, std::span<const model::Sequence>(data), tc, 3);
    const auto path = temp_path("ck.tjgp");
    model::save_checkpoint(ck, path);
    const auto back = model::load_checkpoint<float>(path);
    CHECK(same_params(back.params, ck.params));
    CHECK(back.step == 3);
    CHECK(back.seed == 11);
    CHECK(back.optimizer->step == ck.optimizer->step);
    const auto s = random_seq(15, 20, rng);
    CHECK(model::forward<float>(back.params, s.tokens, s.times) == model::forward<float>(ck.params, s.tokens, s.times));
    const auto path2 = temp_path("ck2.tjgp");
    model::save_checkpoint(back, path2);
    CHECK(file_bytes(path) == file_bytes(path2));
    CHECK(model::checkpoint_precision(path) == Precision::f32);

    const std::string good = file_bytes(path);
    auto expect_kind = [&](const std::string& bytes, model::CheckpointError::Kind kind) {
        const auto bad = temp_path("bad.tjgp");
        put_bytes(bad, bytes);
        try {
            model::load_checkpoint<float>(bad);
            FAIL("checkpoint should have been rejected");
        } catch (const model::CheckpointError& e) {
            CHECK(e.kind() == kind);
        }
    };
    std::string magic = good;
    magic[0] = 'X';
    expect_kind(magic, model::CheckpointError::Kind::bad_magic);
    std::string version = good;
    version[4] = 9;
    expect_kind(version, model::CheckpointError::Kind::version);
    expect_kind(good.substr(0, good.size() - 5), model::CheckpointError::Kind::truncated);
    expect_kind(good + "x", model::CheckpointError::Kind::shape);
    CHECK_THROWS_AS(model::load_checkpoint<float>(temp_path("missing.tjgp")), FormatError);
    try {
        model::load_checkpoint<double>(path);
        FAIL("cross-precision load should fail");
    } catch (const model::CheckpointError& e) {
        CHECK(e.kind() == model::CheckpointError::Kind::precision);
        CHECK(std::string(e.what()).find("refusing to cast") != std::string::npos);
    }
    auto dcfg = cfg;
    dcfg.precision = Precision::f64;
    auto dck = cli::initial_checkpoint<double>(dcfg, tc);
    model::save_checkpoint(dck, path2);
    CHECK_THROWS_AS(model::load_checkpoint<float>(path2), model::CheckpointError);

    // a tensor whose recorded shape disagrees with the config
    auto wrong = ck;
    wrong.params.layers[0].ff_b1 = Matrix<float>(1, 3);
    CHECK_THROWS_AS(model::save_checkpoint(wrong, path2), ContractViolation);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("training is deterministic and resumable") {
    std::mt19937_64 rng(10);
    std::vector<model::Sequence> data;
    for (int i = 0; i < 12; ++i) {
        data.push_back(random_seq(20 + i, 20, rng));
    }
    auto cfg = tiny(20, 8, 2, 2);
    model::TrainConfig tc;
    tc.seed = 21;
    tc.batch_size = 3;
    tc.max_len = 16;
    auto a = cli::initial_checkpoint<float>(cfg, tc);
    auto b = cli::initial_checkpoint<float>(cfg, tc);
    const auto init = a;
    const auto pa = temp_path("det_a.tjgp"), pb = temp_path("det_b.tjgp"), pc = temp_path("det_c.tjgp");
    cli::pretrain(a, std::span<const model::Sequence>(data), tc, 0);
    CHECK(same_params(a.params, init.params));
    cli::pretrain(a, std::span<const model::Sequence>(data), tc, 10);
    cli::pretrain(b, std::span<const model::Sequence>(data), tc, 10);
    model::save_checkpoint(a, pa);
    model::save_checkpoint(b, pb);
    CHECK(file_bytes(pa) == file_bytes(pb));

    // interrupt at 4, reload, finish
    auto c = cli::initial_checkpoint<float>(cfg, tc);
    cli::pretrain(c, std::span<const model::Sequence>(data), tc, 4);
    model::save_checkpoint(c, pc);
    auto resumed = model::load_checkpoint<float>(pc);
    cli::pretrain(resumed, std::span<const model::Sequence>(data), tc, 10);
    model::save_checkpoint(resumed, pc);
    CHECK(file_bytes(pa) == file_bytes(pc));
    for (const auto& p : {pa, pb, pc}) {
        fs::remove(p);
    }
}

TEST_CASE("config json round trip rejects unknown keys") {
    auto cfg = tiny();
    cfg.fixed_gamma = 0.96;
    cfg.positional = model::Positional::absolute;
    const auto back = model::model_config_from_json(model::to_json(cfg));
    CHECK(model::to_json(back) == model::to_json(cfg));
    auto j = model::to_json(cfg);
    j["dropout"] = 0.1;
    CHECK_THROWS_AS(model::model_config_from_json(j), ContractViolation);
}

TEST_CASE("stream replays forward exactly") {
    std::mt19937_64 rng(12);
    for (auto attention : {model::Attention::sra, model::Attention::softmax}) {
        auto cfg = tiny(25, 16, 4, 2);
        cfg.attention = attention;
        const auto p = model::init_params<float>(cfg, 13);
        const auto s = random_seq(14, 25, rng);
        const auto full = model::forward<float>(p, model::make_prefix_input(s.tokens, s.times)).logits;
        model::Stream<float> st(p);
        st.begin(s.times[0]);
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            const auto row = st.query(s.times[i]);
            CHECK(std::equal(row.begin(), row.end(), full.row(i).begin()));
            st.absorb(s.tokens[i], s.times[i]);
        }
        const auto last = st.query(s.times.back());
        CHECK(std::equal(last.begin(), last.end(), full.row(s.tokens.size()).begin()));
        if (attention == model::Attention::sra) {
            const auto gap0 = st.query(s.times.back(), ode::GapMode::history_only);
            CHECK(std::equal(gap0.begin(), gap0.end(), full.row(s.tokens.size()).begin()));
        } else {
            CHECK_THROWS_AS(st.query(s.times.back() + 1.0, ode::GapMode::full), ContractViolation);
        }
    }
}
