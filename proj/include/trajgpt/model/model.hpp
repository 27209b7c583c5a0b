#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajgpt/numerics/matrix.hpp"
#include "trajgpt/numerics/tape.hpp"
#include "trajgpt/odebridge/odebridge.hpp"
#include "trajgpt/positional/rope.hpp"
#include "trajgpt/sra/sra.hpp"

namespace trajgpt::model {

inline constexpr int kSosId = 0;

enum class Positional { rope, absolute };
enum class Attention { sra, softmax };

struct ModelConfig {
    std::size_t vocab_size = 50;
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t ff_width = 0;  // 0 means 2d
    double tau = 20.0;
    double theta_base = 10000.0;
    double time_scale = 1.0;
    Precision precision = Precision::f32;
    std::optional<double> fixed_gamma;  // ablation: constant decay instead of the gate
    Positional positional = Positional::rope;
    Attention attention = Attention::sra;
    bool tie_embeddings = false;
    double norm_eps = 1e-6;
    double query_scale = 0.0;  // 0 means 1/sqrt(head_dim)

    std::size_t head_dim() const { return heads == 0 ? 0 : d / heads; }
    std::size_t ff() const { return ff_width == 0 ? 2 * d : ff_width; }
    int pad_id() const { return static_cast<int>(vocab_size) - 1; }
    /// Attention config shared by every layer.
    sra::Config attention_config() const;
};

void validate(const ModelConfig& cfg);

/// Canonical JSON form (keys sorted by the json library).
nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

std::string to_string(Positional p);
std::string to_string(Attention a);

template <typename T>
struct LayerParams {
    Matrix<T> norm1;  // 1×d
    sra::Weights<T> attn;
    Matrix<T> norm2;  // 1×d
    Matrix<T> ff_w1;  // d×ff
    Matrix<T> ff_b1;  // 1×ff
    Matrix<T> ff_w2;  // ff×d
    Matrix<T> ff_b2;  // 1×d
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Matrix<T> embedding;  // vocab×d
    std::vector<LayerParams<T>> layers;
    Matrix<T> final_norm;  // 1×d
    Matrix<T> head_w;      // d×vocab, empty when tied
    Matrix<T> head_b;      // 1×vocab

    /// Every trainable tensor with a stable name, in a fixed order.
    std::vector<std::pair<std::string, Matrix<T>*>> tensors();
    std::vector<std::pair<std::string, const Matrix<T>*>> tensors() const;
    std::size_t parameter_count() const;
};

/// Scaled normal initialisation (std 1/sqrt(fan_in); residual output maps
/// additionally scaled by 1/sqrt(2L)); gains start at one, biases at zero.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
void validate(const ModelParams<T>& p);

/// Token ids, key times and query times of one model pass. Row n is keyed at
/// key_times[n] and queried at query_times[n].
struct ModelInput {
    std::vector<int> tokens;
    std::vector<double> key_times;
    std::vector<double> query_times;
};

/// Next-token training pair for an observed sequence x_1..x_N:
/// inputs [SOS, x_1..x_{N−1}], targets x_1..x_N. The [SOS] row is keyed at t_1
/// and every row is queried at the time of the token it predicts.
struct TrainingExample {
    ModelInput input;
    std::vector<int> targets;
};

TrainingExample make_training_example(std::span<const int> tokens, std::span<const double> times);

/// Input whose final row predicts the observation after x_1..x_N at
/// `final_query_time` (defaults to t_N, the zero-gap query).
ModelInput make_prefix_input(std::span<const int> tokens, std::span<const double> times,
                             std::optional<double> final_query_time = std::nullopt);

/// Sinusoidal encoding of position index `pos` (absolute-PE ablation).
template <typename T>
std::vector<T> absolute_encoding(std::size_t pos, std::size_t d);

/// Tape handles for every parameter tensor.
template <typename T>
struct ModelVars {
    Var<T> embedding;
    struct Layer {
        Var<T> norm1;
        ad::SraVars<T> attn;
        Var<T> norm2;
        Var<T> ff_w1, ff_b1, ff_w2, ff_b2;
    };
    std::vector<Layer> layers;
    Var<T> final_norm;
    std::optional<Var<T>> head_w;
    Var<T> head_b;
    /// Same order as ModelParams::tensors().
    std::vector<Var<T>> all;
};

/// Puts the parameters on the tape, as leaves when `trainable`, else as constants.
template <typename T>
ModelVars<T> bind(Tape<T>& tape, const ModelParams<T>& params, bool trainable);

template <typename T>
struct ForwardVars {
    Var<T> hidden;  // final-normed rows, N×d
    Var<T> logits;  // N×vocab
};

/// The recurrent SRA form is the default because it matches the streaming
/// engine bit for bit.
template <typename T>
ForwardVars<T> forward_tape(const ModelVars<T>& vars, const ModelConfig& cfg,
                            const ModelInput& input,
                            ad::AttentionKind sra_kind = ad::AttentionKind::sra_recurrent);

template <typename T>
struct ForwardResult {
    Matrix<T> hidden;
    Matrix<T> logits;
};

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const ModelInput& input,
                         sra::Form form = sra::Form::recurrent);

/// Plain forward over raw (tokens, times): key and query times both equal `times`.
template <typename T>
Matrix<T> forward(const ModelParams<T>& params, std::span<const int> tokens,
                  std::span<const double> times, sra::Form form = sra::Form::recurrent);

/// Mean cross-entropy over rows whose target is not ignore_id.
template <typename T>
T nll_loss(const Matrix<T>& logits, std::span<const int> targets, int ignore_id = -1);

/// Incremental evaluation of the model. Positions are committed one at a time;
/// the newest token stays pending until the next one arrives, because its
/// query time is the time of the token it predicts.
template <typename T>
class Stream {
public:
    explicit Stream(const ModelParams<T>& params);

    /// Starts a sequence: pending = ([SOS], t0).
    void begin(double t0);
    /// Commits the pending position (queried at `time`) and makes (token, time) pending.
    void absorb(int token, double time);
    /// Logits of the pending position queried at `query_time`. With a gap mode
    /// every SRA state is decayed over query_time − pending key time first.
    /// Nothing is committed.
    std::vector<T> query(double query_time, std::optional<ode::GapMode> gap = std::nullopt,
                         std::vector<T>* hidden_out = nullptr) const;

    double pending_time() const { return pending_time_; }
    int pending_token() const { return pending_token_; }
    std::size_t committed() const { return committed_; }
    bool started() const { return started_; }

private:
    struct LayerState {
        std::vector<sra::State<T>> heads;
        Matrix<T> k_cache;  // softmax baseline: rotated keys, one row per position
        Matrix<T> v_cache;
    };

    /// Runs the pending row through the stack; commits states when `commit`.
    std::vector<T> run(double query_time, std::optional<ode::GapMode> gap, bool commit,
                       std::vector<T>* hidden_out);

    const ModelParams<T>* params_;
    sra::Config acfg_;
    std::vector<LayerState> layers_;
    int pending_token_ = kSosId;
    double pending_time_ = 0.0;
    std::size_t committed_ = 0;
    bool started_ = false;
};

// Training.

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    std::size_t warmup = 200;
    double clip = 1.0;  // global gradient-norm clip, 0 disables
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::size_t max_len = 64;  // longer sequences use a window chosen per step
    std::uint64_t seed = 1;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

template <typename T>
struct AdamState {
    std::vector<Matrix<T>> m;
    std::vector<Matrix<T>> v;
    std::size_t step = 0;

    static AdamState zeros(const ModelParams<T>& params);
};

struct Sequence {
    std::vector<int> tokens;
    std::vector<double> times;
};

/// Learning rate at optimizer step `step` (1-based): linear warmup then constant.
double learning_rate(const TrainConfig& cfg, std::size_t step);

/// Mean loss and the gradient of every tensor (ModelParams::tensors() order).
template <typename T>
struct LossAndGrad {
    T loss;
    std::size_t count;
    std::vector<Matrix<T>> grads;
};

template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& params, std::span<const Sequence> batch,
                             ad::AttentionKind sra_kind = ad::AttentionKind::sra_recurrent);

/// One Adam update on the batch. Returns the mean loss before the update.
/// A non-finite loss or gradient throws NumericFailure listing gradient norms per layer.
template <typename T>
T train_step(ModelParams<T>& params, AdamState<T>& opt, std::span<const Sequence> batch,
             const TrainConfig& cfg);

/// Deterministic batch for optimizer step `step` (1-based) drawn from `data`;
/// sequences longer than max_len are cut to a window also chosen by (seed, step).
std::vector<Sequence> select_batch(std::span<const Sequence> data, const TrainConfig& cfg,
                                   std::size_t step);

/// Mean next-token loss over whole sequences (no gradient).
template <typename T>
double evaluate_loss(const ModelParams<T>& params, std::span<const Sequence> data);

// Checkpoints.

class CheckpointError : public FormatError {
public:
    enum class Kind { io, bad_magic, version, truncated, shape, precision, config };
    CheckpointError(Kind kind, const std::string& msg) : FormatError(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
    ModelParams<T> params;
    std::optional<AdamState<T>> optimizer;
    std::size_t step = 0;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();  // stored verbatim in the config block
};

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path);

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

/// Precision recorded in a checkpoint's config block.
Precision checkpoint_precision(const std::string& path);

}  // namespace trajgpt::model
