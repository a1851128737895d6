#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "forenx/model.hpp"

namespace forenx {

struct LoraSpec {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.9;
    std::vector<std::string> targets{"q", "k", "v"};

    void validate() const;
    /// Same rank/alpha, dropout 0 so desk runs are deterministic.
    static LoraSpec toy();
};

enum class Tower { Vision, Language };
const char* to_string(Tower t);

/// Attaches a low-rank adapter to every target projection of every block in the tower.
/// Throws ValidationError for an unknown target or an already adapted projection.
void apply_lora(ForenxModel& model, const LoraSpec& spec, Tower tower, std::mt19937_64& rng);

/// Folds adapters into the base weights. Throws if the tower carries no adapter.
void merge_lora(ForenxModel& model, Tower tower);

// ---- Losses -----------------------------------------------------------------

void check_binary_label(int y);

/// Binary cross-entropy on logistic(logit).
double loss_detection(double logit, int y);
ag::Var loss_detection(const ag::Var& logit, int y);
double loss_detection_mean(std::span<const double> logits, std::span<const int> labels);

/// Mean next-token cross-entropy over the answer positions of the sequence.
/// An empty mask is rejected when `training` is set; otherwise it yields 0.
ag::Var loss_instruction(const ag::Var& lm_logits, std::span<const int> targets,
                         std::span<const bool> loss_mask, bool training = true);
ag::Var loss_instruction(const ag::Var& lm_logits, const TokenSequence& seq, bool training = true);

struct LossWeights {
    double detection = 1.0;
    double instruction = 1.0;
};

/// Stage 1: w_det * l_det + w_inst * l_inst (detection term dropped when disabled).
/// Stage 2: l_inst.
double total_loss(double l_det, double l_inst, int stage, bool enable_detection_loss = true,
                  const LossWeights& w = {});
ag::Var total_loss(const ag::Var& l_det, const ag::Var& l_inst, int stage,
                   bool enable_detection_loss = true, const LossWeights& w = {});

// ---- Stage planning ----------------------------------------------------------

struct StagePlan {
    int stage = 1;
    std::set<ParamGroup> trainable;
    bool detection_loss = true;
    bool instruction_loss = true;
    std::string dataset;
    double learning_rate = 2e-5;
    std::size_t batch_size = 128;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0: run all epochs
    double clip_norm = 1.0;
    LossWeights weights;
    std::uint64_t seed = 0;

    /// Trainable groups and losses implied by the stage and the ablation toggles.
    static StagePlan for_stage(int stage, const ModelConfig& cfg);
    void validate(const ModelConfig& cfg) const;
    bool trains(ParamGroup g) const { return trainable.count(g) > 0; }
};

bool is_base_group(ParamGroup g);

// ---- Optimizer ------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainState {
    std::uint64_t step = 0;
    std::mt19937_64 rng;
    AdamConfig adam;
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
    std::map<ParamGroup, bool> frozen;
    double loss_sum = 0.0;
    std::uint64_t loss_count = 0;

    explicit TrainState(std::uint64_t seed = 0) : rng(seed) {}
    double mean_loss() const { return loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0; }
};

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

void adam_step(const ParameterList& params, TrainState& state, double lr);

/// Marks every parameter outside `trainable` as not requiring gradients; restores on exit.
class FreezeScope {
public:
    FreezeScope(const ParameterList& params, const std::set<ParamGroup>& trainable);
    ~FreezeScope();
    FreezeScope(const FreezeScope&) = delete;
    FreezeScope& operator=(const FreezeScope&) = delete;

private:
    std::vector<std::pair<std::shared_ptr<ag::Node>, bool>> saved_;
};

// ---- Training ---------------------------------------------------------------------

struct StepMetrics {
    std::uint64_t step = 0;
    std::optional<double> l_det;
    std::optional<double> l_inst;
    double l_total = 0.0;
};

/// Append-only JSON-lines writer; safe to call from several threads.
class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::filesystem::path& path);
    void append(const StepMetrics& m);
    const std::vector<StepMetrics>& records() const { return records_; }

private:
    std::mutex mu_;
    std::ofstream out_;
    std::vector<StepMetrics> records_;
};

class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(std::uint64_t step, const std::string& what)
        : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + what),
          step_(step) {}
    std::uint64_t step() const { return step_; }

private:
    std::uint64_t step_;
};

struct TrainResult {
    std::uint64_t steps = 0;
    double final_loss = 0.0;
};

/// Runs the plan over `data` (seeded shuffle per epoch). Examples need labels when the
/// detection loss is active and answers when the instruction loss is active.
TrainResult train(const StagePlan& plan, std::span<const Example> data, ForenxModel& model,
                  TrainState& state, MetricsLog* log = nullptr);

/// Fraction of distinct images whose detection logit sign matches the label.
double detection_accuracy(const ForenxModel& model, std::span<const Example> data);

struct TextExample {
    std::string system;
    std::string question;
    std::string answer;
};

struct PretrainPlan {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    double learning_rate = 3e-3;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
};

/// Text-only warm-up of the language base so the toy model starts from a fluent
/// prior instead of random weights. Returns the mean loss of the last step.
double pretrain_language(ForenxModel& model, std::span<const TextExample> texts,
                         const PretrainPlan& plan, MetricsLog* log = nullptr);

// ---- Hashing ------------------------------------------------------------------------

/// SHA-256 over (name, shape, raw bytes) of every selected parameter, in model order.
std::string parameter_hash(const ForenxModel& model,
                           const std::function<bool(const NamedParameter&)>& select);
std::string parameter_hash(const ForenxModel& model, const std::set<ParamGroup>& groups);
std::string parameter_hash(const ForenxModel& model);

}  // namespace forenx
