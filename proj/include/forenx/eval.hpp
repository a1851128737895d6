#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forenx/adaptation.hpp"
#include "forenx/config.hpp"
#include "forenx/dataset.hpp"

namespace forenx {

enum class Verdict { Fake, Real, Abstain };
const char* to_string(Verdict v);

struct ParseResult {
    Verdict verdict = Verdict::Abstain;
    std::string matched;  // first alphabetic token as written, empty when none
    std::string raw;
};

/// Skips leading non-letters and compares the first alphabetic token with yes/no,
/// ignoring case. Anything else abstains.
ParseResult parse_answer(std::string_view text);

/// Percentage of predictions equal to their label; abstentions count as wrong.
double accuracy(std::span<const Verdict> predictions, std::span<const Label> labels);

/// Unweighted mean of per-source accuracies, full precision.
double mean_accuracy(std::span<const double> per_source);

/// Half-up rounding at the given number of decimals.
double round_half_up(double x, int decimals = 1);
std::string format_fixed1(double x);

struct SourceResult {
    std::string source;
    std::size_t n = 0;
    double accuracy = 0.0;  // full precision
    std::size_t abstain = 0;
};

struct EvaluationReport {
    std::string config_fingerprint;
    std::string prompt_version;
    std::vector<SourceResult> per_source;  // registry order
    double macc = 0.0;                     // full precision

    /// Report file body: percentages rounded half-up to one decimal.
    Json to_json() const;
    std::string dump() const;
};

/// Aligned text table with one row per report and one column per source plus mAcc.
std::string format_table(std::span<const std::pair<std::string, EvaluationReport>> rows);

struct EvalOptions {
    std::size_t max_tokens = 8;
};

/// Generates with the version's exact prompt (detection logit when the model has no
/// language model), parses, and aggregates per source in registry order.
EvaluationReport run_eval(const ForenxModel& model, const LoadedDataset& data, std::string_view prompt_version,
                          const EvalOptions& opts = {});

/// v1..v5 in order.
std::vector<std::pair<std::string, EvaluationReport>> run_prompt_suite(const ForenxModel& model,
                                                                       const LoadedDataset& data,
                                                                       const EvalOptions& opts = {});

/// The cumulative component rows plus the three variant pairs.
struct AblationConfig {
    std::string name;
    bool enable_forensic_projector = true;
    bool enable_detection_loss = true;
    bool enable_llm = true;
    bool enable_vision_lora = true;
    DetectorHead detector_head = DetectorHead::Sum;
    ForensicMode forensic_mode = ForensicMode::Pooler;
    EmbeddingMode embedding_mode = EmbeddingMode::Vector;

    ModelConfig apply(ModelConfig base) const;
    Json to_json() const;
};

/// 5 cumulative rows followed by (sum, mlp), (pooler, all), (vector, matrix).
std::vector<AblationConfig> ablation_matrix();

struct AblationSetup {
    ModelConfig base;
    LoraSpec lora = LoraSpec::toy();
    StageSettings stage1;
    PretrainPlan pretrain;  // steps == 0 skips the text-only warm-up
    std::uint64_t seed = 0;
    std::string prompt_version = "v1";
    EvalOptions eval;
};

struct AblationRun {
    AblationConfig config;
    EvaluationReport report;
    double train_detection_accuracy = 0.0;  // fraction, detection-logit sign on the training images
    std::uint64_t lm_forward_count = 0;
    std::size_t max_forensic_tokens = 0;
    std::uint64_t steps = 0;
};

/// Text-only warm-up corpus: every assistant round of the dataset.
std::vector<TextExample> warmup_corpus(const LoadedDataset& data, std::string_view system_prompt);

/// Fresh model with vision adapters when enabled and language adapters whenever the
/// language model is on.
std::unique_ptr<ForenxModel> build_model(const ModelConfig& cfg, const LoraSpec& lora, std::uint64_t seed);

/// Every run starts from the same seed. Language-base weights come from one warm-up per
/// distinct sequence layout, shared by the runs with that layout.
std::vector<AblationRun> run_ablation(const AblationSetup& setup, const LoadedDataset& train,
                                      const LoadedDataset& test);

Json to_json(const AblationRun& run);

}  // namespace forenx
