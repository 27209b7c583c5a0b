#include "trajgpt/inference/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace trajgpt::infer {

std::string to_string(InferenceMode m) {
    return m == InferenceMode::auto_regressive ? "auto_regressive" : "time_specific";
}

std::string to_string(AbsorbMode m) {
    return m == AbsorbMode::evaluation ? "evaluation" : "rollout";
}

namespace {

template <typename T>
std::vector<double> softmax_impl(std::span<const T> logits) {
    require(!logits.empty(), "softmax: empty row");
    double mx = -INFINITY;
    for (T v : logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - mx);
        z += p[i];
    }
    for (auto& v : p) {
        v /= z;
    }
    return p;
}

template <typename T>
void check_prefix(const model::ModelParams<T>& params, std::span<const int> tokens,
                  std::span<const double> times) {
    require(!tokens.empty(), "inference: empty prefix");
    require(tokens.size() == times.size(), "inference: tokens and times must have equal length");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        require(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < params.config.vocab_size,
                "inference: token id outside vocabulary");
        require(i == 0 || times[i] >= times[i - 1], "inference: timestamps must be non-decreasing");
    }
}

template <typename T>
model::Stream<T> stream_over(const model::ModelParams<T>& params, std::span<const int> tokens,
                             std::span<const double> times) {
    model::Stream<T> s(params);
    s.begin(times[0]);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        s.absorb(tokens[i], times[i]);
    }
    return s;
}

template <typename T>
std::optional<ode::GapMode> gap_for(const model::ModelParams<T>& params, ode::GapMode mode) {
    if (params.config.attention != model::Attention::sra) {
        return std::nullopt;
    }
    return mode;
}

}  // namespace

std::vector<double> softmax(std::span<const float> logits) {
    return softmax_impl(logits);
}

std::vector<double> softmax(std::span<const double> logits) {
    return softmax_impl(logits);
}

int argmax(std::span<const double> row) {
    require(!row.empty(), "argmax: empty row");
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) {
            best = i;
        }
    }
    return static_cast<int>(best);
}

template <typename T>
Forecast autoregressive_forecast(const model::ModelParams<T>& params, std::span<const int> tokens,
                                 std::span<const double> times, std::size_t horizon, double unit) {
    check_prefix(params, tokens, times);
    require(horizon >= 1, "autoregressive_forecast: horizon must be at least 1");
    require(unit > 0.0, "autoregressive_forecast: unit must be positive");
    model::Stream<T> s = stream_over(params, tokens, times);
    Forecast f;
    const double t0 = times.back();
    for (std::size_t k = 1; k <= horizon; ++k) {
        const double t = t0 + static_cast<double>(k) * unit;
        const auto logits = s.query(t);
        auto p = softmax(std::span<const T>(logits));
        const int pred = argmax(p);
        f.target_times.push_back(t);
        f.predicted.push_back(pred);
        f.probs.push_back(std::move(p));
        s.absorb(pred, t);
    }
    return f;
}

template <typename T>
Forecast time_specific_forecast(const model::ModelParams<T>& params, std::span<const int> tokens,
                                std::span<const double> times,
                                std::span<const double> target_times, ode::GapMode gap_mode,
                                AbsorbMode absorb, std::span<const int> truth) {
    check_prefix(params, tokens, times);
    require(params.config.attention == model::Attention::sra,
            "time_specific_forecast: not defined for softmax attention");
    if (absorb == AbsorbMode::evaluation) {
        require(truth.size() == target_times.size(),
                "time_specific_forecast: evaluation mode needs one true token per target");
    }
    double prev = times.back();
    for (double t : target_times) {
        require(t >= prev, "time_specific_forecast: targets must not precede the prefix end and "
                           "must be non-decreasing");
        prev = t;
    }
    model::Stream<T> s = stream_over(params, tokens, times);
    Forecast f;
    for (std::size_t i = 0; i < target_times.size(); ++i) {
        const double t = target_times[i];
        const auto logits = s.query(t, gap_mode);
        auto p = softmax(std::span<const T>(logits));
        const int pred = argmax(p);
        f.target_times.push_back(t);
        f.predicted.push_back(pred);
        f.probs.push_back(std::move(p));
        s.absorb(absorb == AbsorbMode::evaluation ? truth[i] : pred, t);
    }
    return f;
}

template <typename T>
Forecast forecast_targets(const model::ModelParams<T>& params, std::span<const int> tokens,
                          std::span<const double> times, std::size_t lookup, InferenceMode mode,
                          ode::GapMode gap_mode, double unit) {
    check_prefix(params, tokens, times);
    require(lookup >= 1 && lookup <= tokens.size(), "forecast_targets: lookup must lie in [1, N]");
    if (mode == InferenceMode::time_specific) {
        return time_specific_forecast(params, tokens.first(lookup), times.first(lookup),
                                      times.subspan(lookup), gap_mode, AbsorbMode::evaluation,
                                      tokens.subspan(lookup));
    }
    require(unit > 0.0, "forecast_targets: unit must be positive");
    model::Stream<T> s = stream_over(params, tokens.first(lookup), times.first(lookup));
    Forecast f;
    for (std::size_t j = lookup; j < tokens.size(); ++j) {
        const double t = times[j - 1] + unit;
        const auto logits = s.query(t);
        auto p = softmax(std::span<const T>(logits));
        f.target_times.push_back(times[j]);
        f.predicted.push_back(argmax(p));
        f.probs.push_back(std::move(p));
        s.absorb(tokens[j], times[j]);
    }
    return f;
}

std::vector<int> topk_ids(std::span<const double> row, std::size_t k) {
    require(k >= 1 && k <= row.size(), "topk: K must lie in [1, vocab]");
    std::vector<int> ids(row.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](int a, int b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    ids.resize(k);
    return ids;
}

double topk_recall(const std::vector<std::vector<double>>& rows, std::span<const int> truth,
                   std::size_t k) {
    require(rows.size() == truth.size(), "topk_recall: one probability row per target required");
    if (rows.empty()) {
        return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(k <= rows[i].size(), "topk_recall: K exceeds the vocabulary size");
        const auto ids = topk_ids(rows[i], k);
        hits += std::find(ids.begin(), ids.end(), truth[i]) != ids.end() ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(rows.size());
}

template <typename T>
RiskTrajectory risk_trajectory(const model::ModelParams<T>& params, std::span<const int> tokens,
                               std::span<const double> times, int code,
                               std::span<const double> grid, ode::GapMode gap_mode) {
    check_prefix(params, tokens, times);
    require(code >= 0 && static_cast<std::size_t>(code) < params.config.vocab_size,
            "risk_trajectory: code outside vocabulary");
    for (std::size_t i = 1; i < grid.size(); ++i) {
        require(grid[i] >= grid[i - 1], "risk_trajectory: grid must be non-decreasing");
    }
    const auto gap = gap_for(params, gap_mode);
    RiskTrajectory r;
    r.code = code;
    r.grid.assign(grid.begin(), grid.end());

    std::optional<model::Stream<T>> backward;
    model::Stream<T> fwd(params);
    fwd.begin(times[0]);
    std::size_t next = 0;
    for (double g : grid) {
        std::vector<T> logits;
        if (g < times[0]) {
            if (!backward) {
                std::vector<int> rt(tokens.rbegin(), tokens.rend());
                std::vector<double> rtimes;
                for (std::size_t i = times.size(); i-- > 0;) {
                    rtimes.push_back(-times[i]);
                }
                backward = stream_over(params, std::span<const int>(rt), std::span<const double>(rtimes));
            }
            logits = backward->query(-g, gap);
        } else {
            while (next < tokens.size() && times[next] <= g) {
                fwd.absorb(tokens[next], times[next]);
                ++next;
            }
            logits = fwd.query(g, gap);
        }
        r.risk.push_back(softmax(std::span<const T>(logits))[static_cast<std::size_t>(code)]);
    }
    for (std::size_t i = 1; i < r.risk.size(); ++i) {
        r.growth.push_back(r.risk[i] - r.risk[i - 1]);
    }
    return r;
}

template <typename T>
std::vector<double> sequence_embedding(const model::ModelParams<T>& params,
                                       std::span<const int> tokens, std::span<const double> times,
                                       std::size_t truncate_at) {
    check_prefix(params, tokens, times);
    require(truncate_at >= 1, "sequence_embedding: truncate_at must be at least 1");
    require(truncate_at <= tokens.size(), "sequence_embedding: truncate_at exceeds the length");
    const auto in = model::make_prefix_input(tokens.first(truncate_at), times.first(truncate_at));
    const auto res = model::forward(params, in);
    std::vector<double> e(params.config.d, 0.0);
    for (std::size_t r = 1; r < res.hidden.rows(); ++r) {
        for (std::size_t j = 0; j < e.size(); ++j) {
            e[j] += static_cast<double>(res.hidden(r, j));
        }
    }
    for (auto& v : e) {
        v /= static_cast<double>(truncate_at);
    }
    return e;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "cosine: length mismatch");
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        return 0.0;
    }
    return ab / std::sqrt(aa * bb);
}

Classification nearest_centroid(const std::vector<std::pair<int, std::vector<double>>>& centroids,
                                std::span<const double> query) {
    require(!centroids.empty(), "centroid_classify: no classes");
    auto sorted = centroids;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    int best = sorted[0].first;
    double best_s = -INFINITY;
    double second = -INFINITY;
    for (const auto& [label, c] : sorted) {
        const double s = cosine(c, query);
        if (s > best_s) {
            second = best_s;
            best_s = s;
            best = label;
        } else if (s > second) {
            second = s;
        }
    }
    return {best, sorted.size() == 1 ? best_s : best_s - second};
}

Classification centroid_classify(const std::vector<std::vector<double>>& embeddings,
                                 std::span<const int> labels, std::span<const double> query) {
    require(embeddings.size() == labels.size(), "centroid_classify: one label per embedding");
    std::map<int, std::pair<std::vector<double>, std::size_t>> acc;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        require(embeddings[i].size() == query.size(), "centroid_classify: dimension mismatch");
        auto& [sum, n] = acc[labels[i]];
        if (sum.empty()) {
            sum.assign(query.size(), 0.0);
        }
        for (std::size_t j = 0; j < sum.size(); ++j) {
            sum[j] += embeddings[i][j];
        }
        ++n;
    }
    std::vector<std::pair<int, std::vector<double>>> centroids;
    for (auto& [label, sn] : acc) {
        require(sn.second > 0, "centroid_classify: empty class");
        for (auto& v : sn.first) {
            v /= static_cast<double>(sn.second);
        }
        centroids.emplace_back(label, std::move(sn.first));
    }
    return nearest_centroid(centroids, query);
}

#define TRAJGPT_INSTANTIATE_INFER(T)                                                          \
    template Forecast autoregressive_forecast(const model::ModelParams<T>&,                   \
                                              std::span<const int>, std::span<const double>,  \
                                              std::size_t, double);                           \
    template Forecast time_specific_forecast(const model::ModelParams<T>&,                    \
                                             std::span<const int>, std::span<const double>,   \
                                             std::span<const double>, ode::GapMode,           \
                                             AbsorbMode, std::span<const int>);               \
    template Forecast forecast_targets(const model::ModelParams<T>&, std::span<const int>,    \
                                       std::span<const double>, std::size_t, InferenceMode,   \
                                       ode::GapMode, double);                                 \
    template RiskTrajectory risk_trajectory(const model::ModelParams<T>&,                     \
                                            std::span<const int>, std::span<const double>,    \
                                            int, std::span<const double>, ode::GapMode);      \
    template std::vector<double> sequence_embedding(const model::ModelParams<T>&,             \
                                                    std::span<const int>,                     \
                                                    std::span<const double>, std::size_t);

TRAJGPT_INSTANTIATE_INFER(float)
TRAJGPT_INSTANTIATE_INFER(double)

#undef TRAJGPT_INSTANTIATE_INFER

}  // namespace trajgpt::infer
