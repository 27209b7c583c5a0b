#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "trajgpt/cli/commands.hpp"
#include "trajgpt/common.hpp"
#include "trajgpt/errors.hpp"

using namespace trajgpt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("trajgpt_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string write_config(const fs::path& dir, const nlohmann::json& j) {
    const auto path = (dir / "config.json").string();
    std::ofstream(path) << j.dump(2);
    return path;
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

std::string bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) {
        n += line.empty() ? 0 : 1;
    }
    return n;
}

cli::Options opts(const std::string& command, const std::string& config) {
    cli::Options o;
    o.command = command;
    o.config_path = config;
    return o;
}

nlohmann::json base_config(const fs::path& dir) {
    return {{"seed", 4},
            {"spec", std::string(TRAJGPT_DATA) + "/canonical_spec.json"},
            {"generate", {{"n_patients", 60}}},
            {"data_dir", (dir / "data").string()},
            {"out", dir.string()},
            {"model", {{"d", 8}, {"heads", 2}, {"layers", 1}}},
            {"train", {{"steps", 6}, {"warmup", 2}, {"batch_size", 2}, {"max_len", 24}}},
            {"eval", {{"max_patients", 4}, {"k", {5, 50}}}},
            {"risk", {{"code", 30}, {"max_patients", 2}}},
            {"embed", {{"truncate_code", 2}, {"label", "phenotype_case"}}},
            {"ablate", {{"seeds", {1}}, {"steps", 3}}}};
}

}  // namespace

TEST_CASE("generate: counts, determinism and the empty cohort") {
    const auto dir = scratch("gen");
    std::ostringstream log;
    auto cfg = base_config(dir);
    cfg["generate"]["n_patients"] = 1000;
    cfg["generate"]["max_len"] = 41;
    cfg["out"] = (dir / "a").string();
    cli::run(opts("generate", write_config(dir, cfg)), log);
    CHECK(line_count(dir / "a" / "train.jsonl") == 800);
    CHECK(line_count(dir / "a" / "valid.jsonl") == 100);
    CHECK(line_count(dir / "a" / "test.jsonl") == 100);
    auto o = opts("generate", write_config(dir, cfg));
    o.out = (dir / "b").string();
    cli::run(o, log);
    const auto ma = read_json(dir / "a" / "manifest.json");
    const auto mb = read_json(dir / "b" / "manifest.json");
    CHECK(ma.at("content_hash") == mb.at("content_hash"));
    CHECK(ma.at("spec_hash") == mb.at("spec_hash"));
    CHECK(ma.at("meta").at("tool_version") == kToolVersion);
    o.seed = 5;
    o.out = (dir / "c").string();
    cli::run(o, log);
    CHECK(read_json(dir / "c" / "manifest.json").at("content_hash") != ma.at("content_hash"));

    cfg["generate"]["n_patients"] = 0;
    cfg["out"] = (dir / "empty").string();
    cli::run(opts("generate", write_config(dir, cfg)), log);
    CHECK(line_count(dir / "empty" / "train.jsonl") == 0);
    CHECK(read_json(dir / "empty" / "manifest.json").at("counts").at("train") == 0);
}

TEST_CASE("config errors") {
    const auto dir = scratch("errors");
    std::ostringstream log;
    auto cfg = base_config(dir);
    cfg["learning_rate"] = 1;
    CHECK_THROWS_AS(cli::run(opts("generate", write_config(dir, cfg)), log), ContractViolation);
    CHECK_THROWS_AS(cli::run(opts("generate", (dir / "nope.json").string()), log), FormatError);
    CHECK_THROWS_AS(cli::run(opts("juggle", write_config(dir, base_config(dir))), log), ContractViolation);
    auto bad_spec = base_config(dir);
    bad_spec["spec"] = (dir / "missing_spec.json").string();
    CHECK_THROWS_AS(cli::run(opts("generate", write_config(dir, bad_spec)), log), FormatError);
    auto no_seed = base_config(dir);
    no_seed.erase("seed");
    CHECK_THROWS_AS(cli::run(opts("generate", write_config(dir, no_seed)), log), ContractViolation);
    const std::string blocker = (dir / "file").string();
    std::ofstream(blocker) << "x";
    auto blocked = base_config(dir);
    blocked["out"] = blocker + "/sub";
    CHECK_THROWS_AS(cli::run(opts("generate", write_config(dir, blocked)), log), FormatError);
}

TEST_CASE("pretrain, resume and every downstream command") {
    const auto dir = scratch("pipe");
    std::ostringstream log;
    auto cfg = base_config(dir);
    auto gen = opts("generate", write_config(dir, cfg));
    gen.out = (dir / "data").string();
    cli::run(gen, log);

    // zero steps: the checkpoint is the initialisation
    cfg["train"]["steps"] = 0;
    cfg["out"] = (dir / "zero").string();
    cli::run(opts("pretrain", write_config(dir, cfg)), log);
    const auto zero = model::load_checkpoint<float>((dir / "zero" / "checkpoint.tjgp").string());
    model::ModelConfig mc = model::model_config_from_json(cfg["model"]);
    const auto init = model::init_params<float>(mc, 4);
    CHECK(zero.step == 0);
    for (std::size_t i = 0; i < init.tensors().size(); ++i) {
        CHECK(*init.tensors()[i].second == *zero.params.tensors()[i].second);
    }

    cfg["train"]["steps"] = 6;
    cfg["out"] = (dir / "full").string();
    cli::run(opts("pretrain", write_config(dir, cfg)), log);
    cfg["train"]["steps"] = 3;
    cfg["out"] = (dir / "part").string();
    cli::run(opts("pretrain", write_config(dir, cfg)), log);
    cfg["train"]["steps"] = 6;
    auto resume = opts("pretrain", write_config(dir, cfg));
    resume.checkpoint = (dir / "part" / "checkpoint.tjgp").string();
    cli::run(resume, log);
    CHECK(bytes(dir / "full" / "checkpoint.tjgp") == bytes(dir / "part" / "checkpoint.tjgp"));
    const auto pre = read_json(dir / "full" / "pretrain.json");
    CHECK(pre.at("step") == 6);
    CHECK(pre.contains("valid_loss"));
    CHECK(pre.contains("unigram_entropy"));

    const std::string ck = (dir / "full" / "checkpoint.tjgp").string();
    cfg["out"] = (dir / "outs").string();
    const auto path = write_config(dir, cfg);
    for (const std::string c : {"evaluate", "forecast", "risk", "embed"}) {
        auto o = opts(c, path);
        o.checkpoint = ck;
        cli::run(o, log);
    }
    const auto rep = read_json(dir / "outs" / "report.json");
    // K equal to the vocabulary always recalls the truth
    CHECK(rep.at("time_specific").at("overall").at("50") == 1.0);
    CHECK(rep.at("auto_regressive").at("overall").at("50") == 1.0);
    CHECK(rep.contains("bayes_oracle"));
    CHECK(rep.contains("marginal_baseline"));
    CHECK(rep.at("meta").at("command") == "evaluate");
    for (const char* f : {"forecast.jsonl", "risk.jsonl", "embeddings.jsonl"}) {
        std::ifstream in(dir / "outs" / f);
        std::string first;
        std::getline(in, first);
        CHECK(nlohmann::json::parse(first).at("meta").contains("config_hash"));
    }

    auto big_k = opts("evaluate", path);
    big_k.checkpoint = ck;
    big_k.k = std::vector<std::size_t>{51};
    CHECK_THROWS_AS(cli::run(big_k, log), ContractViolation);
    auto wrong_precision = opts("evaluate", path);
    wrong_precision.checkpoint = ck;
    wrong_precision.precision = "f64";
    CHECK_THROWS_AS(cli::run(wrong_precision, log), model::CheckpointError);

    // the effective config, not the file, is hashed
    auto a = opts("evaluate", path);
    auto b = a;
    b.k = std::vector<std::size_t>{5};
    CHECK(cli::meta_block(cli::effective_config(a), "x") != cli::meta_block(cli::effective_config(b), "x"));
}

TEST_CASE("ablation table shape and determinism") {
    const auto dir = scratch("ablate");
    std::ostringstream log;
    auto cfg = base_config(dir);
    auto gen = opts("generate", write_config(dir, cfg));
    gen.out = (dir / "data").string();
    cli::run(gen, log);
    cfg["out"] = (dir / "one").string();
    cli::run(opts("ablate", write_config(dir, cfg)), log);
    cfg["out"] = (dir / "two").string();
    cli::run(opts("ablate", write_config(dir, cfg)), log);
    auto t1 = read_json(dir / "one" / "ablation.json");
    auto t2 = read_json(dir / "two" / "ablation.json");
    CHECK(t1.at("rows") == t2.at("rows"));
    REQUIRE(t1.at("rows").size() == 4);
    for (const auto& row : t1.at("rows")) {
        const auto v = row.at("variant").get<std::string>();
        CHECK(row.at("median").at("auto_regressive").is_object());
        if (v == "gpt2") {
            CHECK(row.at("median").at("time_specific") == "not_applicable");
        } else {
            CHECK(row.at("median").at("time_specific").is_object());
        }
    }
}
