#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "forenx/clients.hpp"
#include "forenx/config.hpp"
#include "forenx/dataset.hpp"
#include "forenx/eval.hpp"
#include "forenx/judge.hpp"

namespace forenx {

/// Detection prompt used when building training conversations.
inline constexpr std::string_view kTrainingPrompt = "v1";

/// Captioner, summarizer and judge chosen by the config (mock or live).
class Backends {
public:
    explicit Backends(const PipelineConfig& cfg);
    Captioner& captioner() { return *captioner_; }
    Summarizer& summarizer() { return *summarizer_; }
    Judge& judge() { return *judge_; }

private:
    std::unique_ptr<ChatClient> chat_;
    std::unique_ptr<RequestLog> log_;
    std::unique_ptr<Captioner> captioner_;
    std::unique_ptr<Summarizer> summarizer_;
    std::unique_ptr<Judge> judge_;
};

struct DatasetBuild {
    std::map<std::string, std::vector<ConversationRecord>> splits;  // "train", "test"
    std::map<std::pair<std::string, std::string>, std::size_t> counts;  // (split, source) -> records
    std::vector<std::filesystem::path> files;
};

/// Train split from `train_kinds`, test split from the configured test kinds. Images are
/// written under work/images as PPM.
DatasetBuild build_synthetic_dataset(const PipelineConfig& cfg, const std::vector<ArtifactKind>& train_kinds,
                                     Backends& backends);

/// Manifest build from paths.images. When paths.annotations is set, the train split is
/// assembled into the reasoning fine-tuning set with the configured counts.
DatasetBuild build_manifest_dataset(const PipelineConfig& cfg, Backends& backends);

struct TrainOutcome {
    std::filesystem::path checkpoint;
    std::uint64_t steps = 0;
    double final_loss = 0.0;
    double detection_accuracy = 0.0;  // fraction on the training images
};

/// Text-only warm-up of the language base; writes the foundation checkpoint.
TrainOutcome run_pretrain(const PipelineConfig& cfg);

/// Stage 1 starts from a fresh model with the foundation's language weights (running the
/// warm-up first when the foundation is missing). Stage 2 continues from the stage-1
/// checkpoint, which must exist and match the config.
TrainOutcome run_train(const PipelineConfig& cfg, int stage);

/// Loads a checkpoint, rejecting it when `expected` is given and its fingerprint differs.
std::unique_ptr<ForenxModel> load_model_checked(const std::filesystem::path& checkpoint,
                                                const std::optional<ModelConfig>& expected);

/// "all" expands to v1..v5.
std::vector<std::string> expand_prompts(const std::string& prompt);

/// Writes report_<version>.json per report and table.txt into `dir`.
void write_eval_reports(const std::filesystem::path& dir,
                        const std::vector<std::pair<std::string, EvaluationReport>>& reports);

AblationSetup ablation_setup(const PipelineConfig& cfg);
/// ablation.json plus ablation_table.txt.
void write_ablation_reports(const std::filesystem::path& dir, const std::vector<AblationRun>& runs);

std::string judge_table(const std::vector<JudgeRecord>& records);
std::string user_study_table(const std::map<std::string, std::array<double, 5>>& means);

}  // namespace forenx
