#include "trajgpt/cli/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <iomanip>
#include <iostream>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <random>
#include <set>
#include <sstream>

#include "trajgpt/common.hpp"

namespace trajgpt::cli {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTopLevelKeys{
    "seed", "spec",  "data_dir", "out",   "checkpoint", "model",  "train",           "eval",
    "generate", "risk", "embed", "forecast", "ablate", "bench", "checkpoint_every", "comment"};

nlohmann::json section(const nlohmann::json& cfg, const std::string& key) {
    if (!cfg.contains(key)) {
        return nlohmann::json::object();
    }
    require(cfg.at(key).is_object(), "config: '" + key + "' must be an object");
    return cfg.at(key);
}

template <typename V>
V get_or(const nlohmann::json& j, const std::string& key, V fallback) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return fallback;
    }
    try {
        return j.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config: bad value for '" + key + "': " + e.what());
    }
}

std::string need_string(const nlohmann::json& cfg, const std::string& key, const std::string& why) {
    require(cfg.contains(key) && cfg.at(key).is_string(),
            "config: '" + key + "' is required (" + why + ")");
    return cfg.at(key).get<std::string>();
}

std::uint64_t need_seed(const nlohmann::json& cfg) {
    require(cfg.contains("seed") && cfg.at("seed").is_number_unsigned(),
            "config: a non-negative integer 'seed' is required for this command (or pass --seed)");
    return cfg.at("seed").get<std::uint64_t>();
}

fs::path out_dir(const nlohmann::json& cfg) {
    const fs::path dir = need_string(cfg, "out", "output directory; or pass --out");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw FormatError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
    return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << j.dump(2) << "\n";
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

EvalOptions eval_options(const nlohmann::json& cfg, std::size_t vocab) {
    const auto e = section(cfg, "eval");
    EvalOptions o;
    o.ks = get_or(e, "k", o.ks);
    for (std::size_t k : o.ks) {
        require(k >= 1 && k <= vocab, "evaluate: K=" + std::to_string(k) +
                                          " exceeds the vocabulary size " + std::to_string(vocab));
    }
    o.lookup = get_or(e, "lookup", o.lookup);
    require(o.lookup >= 1, "eval: lookup must be at least 1");
    o.gap_mode = ode::gap_mode_from_string(get_or<std::string>(e, "gap_mode", "history"));
    o.unit = get_or(e, "unit", o.unit);
    require(o.unit > 0.0, "eval: unit must be positive");
    o.max_patients = get_or(e, "max_patients", o.max_patients);
    const auto inf = get_or<std::string>(e, "inference", "both");
    if (inf == "auto") {
        o.modes = {infer::InferenceMode::auto_regressive};
    } else if (inf == "time") {
        o.modes = {infer::InferenceMode::time_specific};
    } else {
        require(inf == "both", "eval: inference must be auto, time or both");
    }
    return o;
}

model::TrainConfig train_config(const nlohmann::json& cfg) {
    model::TrainConfig tc = model::train_config_from_json(section(cfg, "train"));
    tc.seed = need_seed(cfg);
    return tc;
}

model::ModelConfig model_config(const nlohmann::json& cfg) {
    return model::model_config_from_json(section(cfg, "model"));
}

// Checkpoint identity must not depend on how far a run was asked to go.
nlohmann::json resumable_train_json(const model::TrainConfig& tc) {
    nlohmann::json j = model::to_json(tc);
    j.erase("steps");
    return j;
}

fs::path data_file(const nlohmann::json& cfg, const std::string& section_name, const std::string& name) {
    const auto s = section(cfg, section_name);
    if (s.contains("dataset")) {
        return s.at("dataset").get<std::string>();
    }
    return fs::path(need_string(cfg, "data_dir", "directory holding train/valid/test.jsonl")) / name;
}

std::optional<data::GeneratorSpec> optional_spec(const nlohmann::json& cfg) {
    if (!cfg.contains("spec")) {
        return std::nullopt;
    }
    return data::load_spec(cfg.at("spec").get<std::string>());
}

Precision checkpoint_precision_checked(const nlohmann::json& cfg, const std::string& path) {
    const Precision stored = model::checkpoint_precision(path);
    const auto m = section(cfg, "model");
    if (m.contains("precision")) {
        const Precision want = precision_from_string(m.at("precision").get<std::string>());
        if (want != stored) {
            throw model::CheckpointError(model::CheckpointError::Kind::precision,
                                         "checkpoint " + path + " stores " + to_string(stored) +
                                             " values; refusing to cast them to " + to_string(want));
        }
    }
    return stored;
}

double code_entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

// ---- generate ----

void cmd_generate(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const auto spec = data::load_spec(need_string(cfg, "spec", "generator spec path"));
    const std::uint64_t seed = need_seed(cfg);
    const auto g = section(cfg, "generate");
    const auto n = get_or<std::size_t>(g, "n_patients", 1000);
    const auto fr = get_or<std::vector<double>>(g, "fractions", {0.8, 0.1, 0.1});
    require(fr.size() == 3, "generate: fractions must list train, valid and test");
    const auto min_len = get_or(g, "min_len", spec.min_len);
    const auto max_len = get_or(g, "max_len", spec.max_len);
    const fs::path dir = out_dir(cfg);

    const auto cohort = data::generate_cohort(spec, n, min_len, max_len, seed);
    const auto parts = data::split(cohort, fr[0], fr[1], fr[2], seed);
    data::write_dataset(parts.train, (dir / "train.jsonl").string());
    data::write_dataset(parts.valid, (dir / "valid.jsonl").string());
    data::write_dataset(parts.test, (dir / "test.jsonl").string());
    std::string all;
    for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl"}) {
        all += read_text(dir / f);
    }
    nlohmann::json man;
    man["meta"] = meta;
    man["spec_hash"] = data::spec_hash(spec);
    man["seed"] = seed;
    man["n_patients"] = n;
    man["fractions"] = fr;
    man["counts"] = {{"train", parts.train.size()}, {"valid", parts.valid.size()}, {"test", parts.test.size()}};
    man["files"] = {{"train", "train.jsonl"}, {"valid", "valid.jsonl"}, {"test", "test.jsonl"}};
    man["content_hash"] = hex64(fnv1a64(all));
    write_json(dir / "manifest.json", man);
    log << "generated " << n << " patients: " << parts.train.size() << " train, "
        << parts.valid.size() << " valid, " << parts.test.size() << " test -> " << dir.string() << "\n";
}

// ---- pretrain ----

template <typename T>
void pretrain_as(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const model::TrainConfig tc = train_config(cfg);
    const auto train_records = data::read_dataset(data_file(cfg, "train", "train.jsonl").string());
    const fs::path dir = out_dir(cfg);
    model::Checkpoint<T> ck;
    bool resumed = false;
    if (cfg.contains("checkpoint")) {
        const std::string path = cfg.at("checkpoint").get<std::string>();
        checkpoint_precision_checked(cfg, path);
        ck = model::load_checkpoint<T>(path);
        resumed = true;
        require(ck.seed == tc.seed, "pretrain: checkpoint seed " + std::to_string(ck.seed) +
                                        " differs from the configured seed " + std::to_string(tc.seed));
        require(ck.step <= tc.steps, "pretrain: checkpoint is already past the configured steps");
    } else {
        model::ModelConfig mc = model_config(cfg);
        mc.precision = precision_of<T>();
        ck = initial_checkpoint<T>(mc, tc);
    }
    ck.extra["train"] = resumable_train_json(tc);
    for (const auto& r : train_records) {
        data::validate(r, ck.params.config.vocab_size);
    }
    const auto train = to_sequences(train_records);
    const std::size_t every = get_or<std::size_t>(cfg, "checkpoint_every", 0);
    const fs::path ck_path = dir / "checkpoint.tjgp";

    std::ofstream loss_log(dir / "loss.log", resumed ? std::ios::app : std::ios::trunc);
    if (!loss_log) {
        throw FormatError("cannot write " + (dir / "loss.log").string());
    }
    if (!resumed) {
        loss_log << "# " << nlohmann::json{{"meta", meta}}.dump() << "\n";
    }
    log << (resumed ? "resuming" : "starting") << " at step " << ck.step << " of " << tc.steps
        << " (" << ck.params.parameter_count() << " parameters, " << to_string(precision_of<T>())
        << ")\n";
    double window = 0.0;
    std::size_t in_window = 0;
    double last = NAN;
    pretrain(ck, std::span<const model::Sequence>(train), tc, tc.steps, [&](std::size_t step, double loss) {
        loss_log << step << " " << std::setprecision(9) << loss << "\n";
        window += loss;
        ++in_window;
        last = loss;
        if (step % 100 == 0) {
            log << "step " << step << " mean loss " << window / static_cast<double>(in_window) << "\n";
            window = 0.0;
            in_window = 0;
        }
        if (every > 0 && step % every == 0) {
            model::save_checkpoint(ck, ck_path.string());
        }
    });
    model::save_checkpoint(ck, ck_path.string());

    nlohmann::json rep;
    rep["meta"] = meta;
    rep["step"] = ck.step;
    rep["last_train_loss"] = std::isfinite(last) ? nlohmann::json(last) : nlohmann::json(nullptr);
    const fs::path valid_path = data_file(cfg, "valid", "valid.jsonl");
    if (fs::exists(valid_path)) {
        const auto valid = to_sequences(data::read_dataset(valid_path.string(), ck.params.config.vocab_size));
        if (!valid.empty()) {
            rep["valid_loss"] = model::evaluate_loss(ck.params, std::span<const model::Sequence>(valid));
        }
    }
    if (const auto spec = optional_spec(cfg)) {
        const auto pi = data::stationary_distribution(*spec);
        std::vector<double> marg(spec->vocab_size, 0.0);
        for (std::size_t z = 0; z < pi.size(); ++z) {
            for (std::size_t c = 0; c < marg.size(); ++c) {
                marg[c] += pi[z] * spec->emission[z][c];
            }
        }
        rep["unigram_entropy"] = code_entropy(marg);
    } else {
        rep["unigram_entropy"] = code_entropy(marginal_frequencies(train_records, ck.params.config.vocab_size));
    }
    write_json(dir / "pretrain.json", rep);
    log << "checkpoint -> " << ck_path.string() << "\n";
}

// ---- evaluate ----

void print_summary(std::ostream& log, const std::string& name, const nlohmann::json& s) {
    if (!s.is_object()) {
        log << std::left << std::setw(20) << name << " " << s.dump() << "\n";
        return;
    }
    log << std::left << std::setw(20) << name;
    for (const auto& [k, v] : s.at("overall").items()) {
        log << "  top-" << k << " " << std::fixed << std::setprecision(4) << v.get<double>();
    }
    log << "  (" << s.at("targets").get<std::size_t>() << " targets)\n";
    log.unsetf(std::ios::floatfield);
}

template <typename T>
void evaluate_as(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const std::string ckp = need_string(cfg, "checkpoint", "checkpoint to evaluate; or pass --checkpoint");
    const auto ck = model::load_checkpoint<T>(ckp);
    const EvalOptions opt = eval_options(cfg, ck.params.config.vocab_size);
    const auto test = data::read_dataset(data_file(cfg, "eval", "test.jsonl").string(), ck.params.config.vocab_size);
    const fs::path dir = out_dir(cfg);
    nlohmann::json rep = evaluate_report(ck.params, test, opt);
    rep["meta"] = meta;
    const auto e = section(cfg, "eval");
    if (const auto spec = optional_spec(cfg); spec && get_or(e, "oracle", true)) {
        const TargetSet orc = oracle_targets(*spec, test, opt);
        rep["bayes_oracle"] = recall_summary(orc, std::span<const std::size_t>(opt.ks));
        const fs::path train_path = data_file(cfg, "train", "train.jsonl");
        if (fs::exists(train_path)) {
            const auto marg = marginal_frequencies(data::read_dataset(train_path.string()), ck.params.config.vocab_size);
            rep["marginal_baseline"] =
                recall_summary(baseline_targets(marg, orc), std::span<const std::size_t>(opt.ks));
        }
    }
    write_json(dir / "report.json", rep);
    for (const char* key : {"time_specific", "auto_regressive", "bayes_oracle", "marginal_baseline"}) {
        if (rep.contains(key)) {
            print_summary(log, key, rep.at(key));
        }
    }
    log << "report -> " << (dir / "report.json").string() << "\n";
}

// ---- forecast ----

template <typename T>
void forecast_as(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const auto ck = model::load_checkpoint<T>(need_string(cfg, "checkpoint", "checkpoint; or pass --checkpoint"));
    EvalOptions opt = eval_options(cfg, ck.params.config.vocab_size);
    const auto f = section(cfg, "forecast");
    opt.lookup = get_or(f, "lookup", opt.lookup);
    const auto mode = opt.modes.size() == 1 ? opt.modes[0] : infer::InferenceMode::time_specific;
    const auto records = data::read_dataset(data_file(cfg, "forecast", "test.jsonl").string(), ck.params.config.vocab_size);
    const fs::path dir = out_dir(cfg);
    const std::size_t kmax = *std::max_element(opt.ks.begin(), opt.ks.end());
    std::ofstream out(dir / "forecast.jsonl", std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + (dir / "forecast.jsonl").string());
    }
    nlohmann::json head = {{"meta", meta}};
    head["meta"]["mode"] = infer::to_string(mode);
    head["meta"]["absorb_mode"] = infer::to_string(infer::AbsorbMode::evaluation);
    out << head.dump() << "\n";
    std::size_t written = 0;
    for (const auto& r : records) {
        if (r.tokens.size() <= opt.lookup) {
            continue;
        }
        if (opt.max_patients > 0 && written >= opt.max_patients) {
            break;
        }
        const auto fc = infer::forecast_targets(ck.params, std::span<const int>(r.tokens),
                                                std::span<const double>(r.times), opt.lookup, mode,
                                                opt.gap_mode, opt.unit);
        const std::vector<int> truth(r.tokens.begin() + static_cast<std::ptrdiff_t>(opt.lookup), r.tokens.end());
        nlohmann::json rec;
        rec["id"] = r.id;
        rec["target_times"] = fc.target_times;
        rec["topk"] = nlohmann::json::array();
        for (const auto& row : fc.probs) {
            rec["topk"].push_back(infer::topk_ids(row, kmax));
        }
        rec["truth"] = truth;
        for (std::size_t k : opt.ks) {
            rec["recall"][std::to_string(k)] = infer::topk_recall(fc.probs, std::span<const int>(truth), k);
        }
        out << rec.dump() << "\n";
        ++written;
    }
    log << "forecasts for " << written << " patients (" << infer::to_string(mode) << ") -> "
        << (dir / "forecast.jsonl").string() << "\n";
}

// ---- risk ----

template <typename T>
void risk_as(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const auto ck = model::load_checkpoint<T>(need_string(cfg, "checkpoint", "checkpoint; or pass --checkpoint"));
    const auto r = section(cfg, "risk");
    require(r.contains("code"), "config: risk.code is required");
    const int code = r.at("code").get<int>();
    const double step = get_or(r, "grid_step", 0.25);
    const double before = get_or(r, "before", 1.0);
    const double after = get_or(r, "after", 2.0);
    const auto max_patients = get_or<std::size_t>(r, "max_patients", 0);
    require(step > 0.0 && before >= 0.0 && after >= 0.0, "risk: grid_step must be positive, before/after non-negative");
    const auto gap = ode::gap_mode_from_string(get_or<std::string>(section(cfg, "eval"), "gap_mode", "history"));
    const auto records = data::read_dataset(data_file(cfg, "risk", "test.jsonl").string(), ck.params.config.vocab_size);
    const fs::path dir = out_dir(cfg);
    std::ofstream out(dir / "risk.jsonl", std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + (dir / "risk.jsonl").string());
    }
    nlohmann::json head = {{"meta", meta}};
    head["meta"]["gap_mode"] = ode::to_string(gap);
    out << head.dump() << "\n";
    std::size_t written = 0;
    for (const auto& rec : records) {
        if (rec.tokens.empty() || (max_patients > 0 && written >= max_patients)) {
            continue;
        }
        std::vector<double> grid;
        const double lo = rec.times.front() - before;
        const double hi = rec.times.back() + after;
        for (std::size_t i = 0;; ++i) {
            const double g = lo + static_cast<double>(i) * step;
            if (g > hi + 1e-12) {
                break;
            }
            grid.push_back(g);
        }
        const auto tr = infer::risk_trajectory(ck.params, std::span<const int>(rec.tokens),
                                               std::span<const double>(rec.times), code,
                                               std::span<const double>(grid), gap);
        out << nlohmann::json{{"id", rec.id}, {"code", code}, {"grid", tr.grid}, {"risk", tr.risk}, {"growth", tr.growth}}.dump()
            << "\n";
        ++written;
    }
    log << "risk trajectories for " << written << " patients -> " << (dir / "risk.jsonl").string() << "\n";
}

// ---- embed ----

template <typename T>
void embed_as(const nlohmann::json& cfg, const nlohmann::json& meta, std::ostream& log) {
    const auto ck = model::load_checkpoint<T>(need_string(cfg, "checkpoint", "checkpoint; or pass --checkpoint"));
    const auto e = section(cfg, "embed");
    const auto truncate_code = get_or<int>(e, "truncate_code", -1);
    const auto truncate_len = get_or<std::size_t>(e, "truncate_len", 0);
    const auto label = get_or<std::string>(e, "label", "");
    const auto records = data::read_dataset(data_file(cfg, "embed", "test.jsonl").string(), ck.params.config.vocab_size);
    const fs::path dir = out_dir(cfg);
    std::ofstream out(dir / "embeddings.jsonl", std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + (dir / "embeddings.jsonl").string());
    }
    out << nlohmann::json{{"meta", meta}}.dump() << "\n";
    std::vector<std::vector<double>> embs;
    std::vector<int> labels;
    for (const auto& r : records) {
        if (r.tokens.empty()) {
            continue;
        }
        std::size_t cut = r.tokens.size();
        if (truncate_code >= 0) {
            const auto it = std::find(r.tokens.begin(), r.tokens.end(), truncate_code);
            cut = std::max<std::size_t>(1, static_cast<std::size_t>(it - r.tokens.begin()));
        }
        if (truncate_len > 0) {
            cut = std::min(cut, truncate_len);
        }
        auto emb = infer::sequence_embedding(ck.params, std::span<const int>(r.tokens),
                                             std::span<const double>(r.times), cut);
        out << nlohmann::json{{"id", r.id}, {"truncate_at", cut}, {"embedding", emb}, {"labels", r.labels}}.dump() << "\n";
        if (!label.empty() && r.labels.contains(label)) {
            const auto& v = r.labels.at(label);
            embs.push_back(std::move(emb));
            labels.push_back(v.is_boolean() ? (static_cast<bool>(v) ? 1 : 0) : static_cast<int>(v));
        }
    }
    log << "embeddings for " << records.size() << " patients -> " << (dir / "embeddings.jsonl").string() << "\n";
    if (!label.empty()) {
        // few-shot protocol: centroids from the first half, queries from the second
        const std::size_t half = embs.size() / 2;
        require(half >= 1, "embed: not enough labelled patients for the centroid check");
        const std::vector<std::vector<double>> support(embs.begin(), embs.begin() + static_cast<std::ptrdiff_t>(half));
        const std::vector<int> support_labels(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(half));
        std::size_t correct = 0;
        for (std::size_t i = half; i < embs.size(); ++i) {
            const auto c = infer::centroid_classify(support, std::span<const int>(support_labels), embs[i]);
            correct += c.label == labels[i] ? 1 : 0;
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(embs.size() - half);
        write_json(dir / "embed_report.json",
                   {{"meta", meta}, {"label", label}, {"support", half}, {"queries", embs.size() - half}, {"accuracy", acc}});
        log << "centroid accuracy on '" << label << "': " << acc << "\n";
    }
}

template <typename F>
void dispatch(Precision p, F&& f) {
    if (p == Precision::f32) {
        f(float{});
    } else {
        f(double{});
    }
}

Precision config_precision(const nlohmann::json& cfg) {
    const auto m = section(cfg, "model");
    return precision_from_string(get_or<std::string>(m, "precision", "f32"));
}

Precision checkpoint_or_config_precision(const nlohmann::json& cfg) {
    if (cfg.contains("checkpoint")) {
        return checkpoint_precision_checked(cfg, cfg.at("checkpoint").get<std::string>());
    }
    return config_precision(cfg);
}

double median(std::vector<double> v) {
    require(!v.empty(), "median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

nlohmann::json effective_config(const Options& opt) {
    require(!opt.config_path.empty(), "--config is required");
    nlohmann::json cfg;
    {
        std::ifstream in(opt.config_path);
        if (!in) {
            throw FormatError("cannot open config " + opt.config_path);
        }
        try {
            cfg = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("config " + opt.config_path + ": " + e.what());
        }
    }
    require(cfg.is_object(), "config must be a JSON object");
    for (const auto& [key, value] : cfg.items()) {
        require(kTopLevelKeys.count(key) == 1, "config: unknown key '" + key + "'");
    }
    if (opt.seed) {
        cfg["seed"] = *opt.seed;
    }
    if (opt.out) {
        cfg["out"] = *opt.out;
    }
    if (opt.checkpoint) {
        cfg["checkpoint"] = *opt.checkpoint;
    }
    if (opt.precision) {
        precision_from_string(*opt.precision);
        cfg["model"]["precision"] = *opt.precision;
    }
    if (opt.inference) {
        require(*opt.inference == "auto" || *opt.inference == "time" || *opt.inference == "both",
                "--inference must be auto, time or both");
        cfg["eval"]["inference"] = *opt.inference;
    }
    if (opt.gap_mode) {
        ode::gap_mode_from_string(*opt.gap_mode);
        cfg["eval"]["gap_mode"] = *opt.gap_mode;
    }
    if (opt.k) {
        require(!opt.k->empty(), "--k needs at least one value");
        cfg["eval"]["k"] = *opt.k;
    }
    return cfg;
}

nlohmann::json meta_block(const nlohmann::json& config, const std::string& command) {
    return {{"tool_version", kToolVersion}, {"config_hash", hex64(fnv1a64(config.dump()))}, {"command", command}};
}

nlohmann::json run_ablation(const AblationSetup& setup, const std::vector<data::Record>& train,
                            const std::vector<data::Record>& test, std::ostream* log) {
    std::vector<std::string> variants = setup.variants;
    if (variants.empty()) {
        variants = {"full", "fixed_gamma", "absolute_pe"};
        if (setup.include_gpt2) {
            variants.push_back("gpt2");
        }
    }
    const auto seqs = to_sequences(train);
    nlohmann::json table = nlohmann::json::array();
    for (const auto& v : variants) {
        model::ModelConfig mc = setup.base;
        if (v == "fixed_gamma") {
            mc.fixed_gamma = setup.fixed_gamma;
        } else if (v == "absolute_pe") {
            mc.positional = model::Positional::absolute;
        } else if (v == "gpt2") {
            mc.attention = model::Attention::softmax;
        } else {
            require(v == "full", "ablate: unknown variant '" + v + "'");
        }
        nlohmann::json row;
        row["variant"] = v;
        row["model"] = model::to_json(mc);
        row["per_seed"] = nlohmann::json::array();
        std::map<std::string, std::map<std::size_t, std::vector<double>>> collected;
        for (std::uint64_t seed : setup.seeds) {
            model::TrainConfig tc = setup.train;
            tc.seed = seed;
            nlohmann::json one;
            one["seed"] = seed;
            auto run = [&](auto tag) {
                using T = decltype(tag);
                auto ck = initial_checkpoint<T>(mc, tc);
                pretrain(ck, std::span<const model::Sequence>(seqs), tc, tc.steps);
                for (auto mode : {infer::InferenceMode::time_specific, infer::InferenceMode::auto_regressive}) {
                    const std::string name = infer::to_string(mode);
                    if (mode == infer::InferenceMode::time_specific && mc.attention != model::Attention::sra) {
                        one[name] = "not_applicable";
                        continue;
                    }
                    const TargetSet ts = collect_targets(ck.params, test, mode, setup.eval);
                    for (std::size_t k : setup.eval.ks) {
                        const double r = infer::topk_recall(ts.probs, ts.truth, k);
                        one[name][std::to_string(k)] = r;
                        collected[name][k].push_back(r);
                    }
                }
            };
            if (mc.precision == Precision::f32) {
                run(float{});
            } else {
                run(double{});
            }
            if (log) {
                *log << "ablate " << v << " seed " << seed << ": " << one.dump() << std::endl;
            }
            row["per_seed"].push_back(one);
        }
        for (auto mode : {infer::InferenceMode::time_specific, infer::InferenceMode::auto_regressive}) {
            const std::string name = infer::to_string(mode);
            if (!collected.count(name)) {
                row["median"][name] = "not_applicable";
                continue;
            }
            for (const auto& [k, vals] : collected[name]) {
                row["median"][name][std::to_string(k)] = median(vals);
            }
        }
        table.push_back(row);
    }
    return {{"steps", setup.train.steps},
            {"seeds", setup.seeds},
            {"absorb_mode", infer::to_string(infer::AbsorbMode::evaluation)},
            {"gap_mode", ode::to_string(setup.eval.gap_mode)},
            {"rows", table}};
}

namespace {

struct Timing {
    double min = 0.0;
    double median = 0.0;
};

// Repeats are interleaved across the cases so that slow phases of the
// machine hit every case alike; the minimum is the least disturbed sample.
std::vector<Timing> time_interleaved(std::size_t repeats, const std::vector<std::function<void()>>& cases) {
    std::vector<std::vector<double>> samples(cases.size());
    for (const auto& f : cases) {
        f();  // warm-up
    }
    for (std::size_t r = 0; r < repeats; ++r) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            cases[i]();
            samples[i].push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
    }
    std::vector<Timing> out;
    for (const auto& v : samples) {
        out.push_back({*std::min_element(v.begin(), v.end()), median(v)});
    }
    return out;
}

model::Sequence random_sequence(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    model::Sequence s;
    double t = 40.0;
    std::uniform_int_distribution<int> tok(1, static_cast<int>(vocab) - 2);
    std::exponential_distribution<double> gap(1.0);
    for (std::size_t i = 0; i < n; ++i) {
        s.tokens.push_back(tok(rng));
        s.times.push_back(t);
        t += gap(rng);
    }
    return s;
}

}  // namespace

nlohmann::json run_bench(const BenchSetup& setup, std::ostream* log) {
    require(!setup.lengths.empty() && setup.repeats >= 1, "bench: need lengths and repeats");
#ifdef __GLIBC__
    // keep large tape buffers on the heap instead of fresh mmaps per step
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    std::mt19937_64 rng(setup.seed);
    model::ModelConfig sra_cfg = setup.model;
    sra_cfg.attention = model::Attention::sra;
    model::ModelConfig soft_cfg = setup.model;
    soft_cfg.attention = model::Attention::softmax;
    const auto sra_params = model::init_params<float>(sra_cfg, setup.seed);
    const auto soft_params = model::init_params<float>(soft_cfg, setup.seed);

    nlohmann::json rep;
    rep["model"] = model::to_json(sra_cfg);
    rep["lengths"] = setup.lengths;
    rep["repeats"] = setup.repeats;
    rep["statistic"] = "min";
    const std::vector<std::pair<std::string, int>> kinds{{"recurrent", 0}, {"parallel", 1}, {"softmax", 2}};
    std::vector<std::vector<model::Sequence>> batches;
    for (std::size_t n : setup.lengths) {
        batches.push_back({random_sequence(n, sra_cfg.vocab_size, rng)});
    }
    for (const auto& [name, kind] : kinds) {
        std::vector<std::function<void()>> cases;
        for (const auto& batch : batches) {
            cases.push_back([&, k = kind] {
                if (k == 2) {
                    model::loss_and_grad(soft_params, std::span<const model::Sequence>(batch));
                } else {
                    model::loss_and_grad(sra_params, std::span<const model::Sequence>(batch),
                                         k == 0 ? ad::AttentionKind::sra_recurrent : ad::AttentionKind::sra_parallel);
                }
            });
        }
        const auto timings = time_interleaved(setup.repeats, cases);
        std::vector<double> mins, medians;
        for (std::size_t i = 0; i < timings.size(); ++i) {
            mins.push_back(timings[i].min);
            medians.push_back(timings[i].median);
            if (log) {
                *log << "bench " << name << " N=" << setup.lengths[i] << " forward+backward min " << timings[i].min
                     << " s, median " << timings[i].median << " s" << std::endl;
            }
        }
        rep["train_step_seconds"][name] = mins;
        rep["train_step_seconds_median"][name] = medians;
        std::vector<double> ratios;
        for (std::size_t i = 1; i < mins.size(); ++i) {
            ratios.push_back(mins[i] / mins[i - 1]);
        }
        rep["doubling_ratios"][name] = ratios;
    }
    std::vector<std::unique_ptr<model::Stream<float>>> streams;
    std::vector<double> ends;
    for (std::size_t h : setup.histories) {
        const auto s = random_sequence(h, sra_cfg.vocab_size, rng);
        auto st = std::make_unique<model::Stream<float>>(sra_params);
        st->begin(s.times[0]);
        for (std::size_t i = 0; i < h; ++i) {
            st->absorb(s.tokens[i], s.times[i]);
        }
        streams.push_back(std::move(st));
        ends.push_back(s.times.back());
    }
    std::vector<std::function<void()>> queries;
    for (std::size_t i = 0; i < streams.size(); ++i) {
        queries.push_back([&, i] {
            for (std::size_t q = 0; q < setup.queries; ++q) {
                streams[i]->query(ends[i] + 0.5, ode::GapMode::history_only);
            }
        });
    }
    const auto qt = time_interleaved(setup.repeats, queries);
    std::vector<double> lat;
    for (std::size_t i = 0; i < qt.size(); ++i) {
        lat.push_back(qt[i].min / static_cast<double>(setup.queries));
        if (log) {
            *log << "bench time-specific query, history " << setup.histories[i] << ": " << lat.back() * 1e6 << " us"
                 << std::endl;
        }
    }
    rep["histories"] = setup.histories;
    rep["query_seconds"] = lat;
    if (lat.size() >= 2) {
        rep["query_latency_ratio"] = lat.back() / lat.front();
    }
    return rep;
}

void run(const Options& opt, std::ostream& log) {
    require(std::find(kCommands.begin(), kCommands.end(), opt.command) != kCommands.end(),
            "unknown command '" + opt.command + "'");
    const nlohmann::json cfg = effective_config(opt);
    const nlohmann::json meta = meta_block(cfg, opt.command);
    const std::string& c = opt.command;
    if (c == "generate") {
        cmd_generate(cfg, meta, log);
    } else if (c == "pretrain") {
        dispatch(checkpoint_or_config_precision(cfg), [&](auto tag) { pretrain_as<decltype(tag)>(cfg, meta, log); });
    } else if (c == "evaluate" || c == "forecast" || c == "risk" || c == "embed") {
        const std::string path = need_string(cfg, "checkpoint", "checkpoint; or pass --checkpoint");
        dispatch(checkpoint_precision_checked(cfg, path), [&](auto tag) {
            using T = decltype(tag);
            if (c == "evaluate") {
                evaluate_as<T>(cfg, meta, log);
            } else if (c == "forecast") {
                forecast_as<T>(cfg, meta, log);
            } else if (c == "risk") {
                risk_as<T>(cfg, meta, log);
            } else {
                embed_as<T>(cfg, meta, log);
            }
        });
    } else if (c == "ablate") {
        const auto a = section(cfg, "ablate");
        AblationSetup s;
        s.base = model_config(cfg);
        s.train = model::train_config_from_json(section(cfg, "train"));
        s.train.steps = get_or(a, "steps", s.train.steps);
        if (cfg.contains("seed") && !a.contains("seeds")) {
            s.seeds = {need_seed(cfg)};
        }
        s.seeds = get_or(a, "seeds", s.seeds);
        s.fixed_gamma = get_or(a, "fixed_gamma", s.fixed_gamma);
        s.include_gpt2 = get_or(a, "include_gpt2", s.include_gpt2);
        s.variants = get_or(a, "variants", s.variants);
        s.eval = eval_options(cfg, s.base.vocab_size);
        const auto train = data::read_dataset(data_file(cfg, "train", "train.jsonl").string(), s.base.vocab_size);
        const auto test = data::read_dataset(data_file(cfg, "eval", "test.jsonl").string(), s.base.vocab_size);
        const fs::path dir = out_dir(cfg);
        nlohmann::json rep = run_ablation(s, train, test, &log);
        rep["meta"] = meta;
        write_json(dir / "ablation.json", rep);
        log << "ablation table -> " << (dir / "ablation.json").string() << "\n";
        for (const auto& row : rep.at("rows")) {
            log << std::left << std::setw(14) << row.at("variant").get<std::string>() << " median "
                << row.at("median").dump() << "\n";
        }
    } else if (c == "bench") {
        const auto b = section(cfg, "bench");
        BenchSetup s;
        s.model = model_config(cfg);
        s.lengths = get_or(b, "lengths", s.lengths);
        s.histories = get_or(b, "histories", s.histories);
        s.repeats = get_or(b, "repeats", s.repeats);
        s.queries = get_or(b, "queries", s.queries);
        s.seed = get_or<std::uint64_t>(cfg, "seed", s.seed);
        const fs::path dir = out_dir(cfg);
        nlohmann::json rep = run_bench(s, &log);
        rep["meta"] = meta;
        write_json(dir / "bench.json", rep);
        log << "bench report -> " << (dir / "bench.json").string() << "\n";
    }
}

}  // namespace trajgpt::cli
