#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "forenx/adaptation.hpp"
#include "forenx/model.hpp"

namespace forenx {

using Json = nlohmann::ordered_json;

/// Strict-schema helpers: every lookup carries the dotted key path for error messages.
namespace cfg {

void expect_object(const Json& j, const std::string& path);
/// Rejects any key of `j` not listed in `allowed`.
void reject_unknown(const Json& j, std::initializer_list<const char*> allowed, const std::string& path);

std::string join(const std::string& path, const std::string& key);

}  // namespace cfg

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

Json to_json(const LoraSpec& s);
LoraSpec lora_spec_from_json(const Json& j, const std::string& path = "lora");

/// SHA-256 of the canonical ModelConfig serialization.
std::string config_fingerprint(const ModelConfig& c);

struct StageSettings {
    double learning_rate = 2e-5;
    std::size_t batch_size = 128;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;
    double clip_norm = 1.0;
    LossWeights loss_weights;

    /// Applies these settings on top of the plan derived from the model toggles.
    StagePlan plan(int stage, const ModelConfig& model, std::uint64_t seed) const;
};

struct SyntheticSettings {
    std::size_t n_train = 64;
    std::size_t n_test = 32;
    std::vector<std::string> train_kinds{"A"};
    std::vector<std::string> test_kinds{"A", "B"};
};

struct ForgReasonSettings {
    std::size_t annotated = 2215;
    std::size_t real = 5000;
    std::size_t fake = 1000;
};

struct LiveClientSettings {
    std::string endpoint = "https://api.openai.com";
    std::string model = "gpt-4o";
    std::size_t max_pairs = 16;
    int timeout_seconds = 60;
};

struct PipelineConfig {
    std::filesystem::path base_dir;  // directory of the config file; relative paths resolve here

    struct Paths {
        std::filesystem::path work_dir = "work";
        std::filesystem::path images;         // optional image manifest for real-data builds
        std::filesystem::path annotations;    // optional annotation file
        std::filesystem::path foundation_checkpoint;
    } paths;

    ModelConfig model;
    LoraSpec lora = LoraSpec::toy();
    PretrainPlan pretrain;
    StageSettings stage1;
    StageSettings stage2;
    SyntheticSettings synthetic;
    ForgReasonSettings forgreason;

    struct Clients {
        std::string captioner = "mock";
        std::string summarizer = "mock";
        std::string judge = "mock";
        LiveClientSettings live;
    } clients;

    struct Eval {
        std::string prompt = "v1";
        std::size_t max_tokens = 16;
    } eval;

    struct Service {
        std::string host = "127.0.0.1";
        int port = 8080;
        std::filesystem::path ui_dir;
    } service;

    std::uint64_t seed = 0;

    std::filesystem::path resolve(const std::filesystem::path& p) const;
    std::filesystem::path work_dir() const { return resolve(paths.work_dir); }
    std::filesystem::path dataset_path(const std::string& split) const;
    /// stage 0 is the text-only foundation checkpoint.
    std::filesystem::path checkpoint_path(int stage) const;
    std::filesystem::path foundation_path() const;
    std::filesystem::path reports_dir() const;
    std::filesystem::path annotations_dir() const;

    /// Desk defaults: toy profile, short schedules.
    static PipelineConfig toy();
};

PipelineConfig pipeline_config_from_json(const Json& j, const std::filesystem::path& base_dir);
Json to_json(const PipelineConfig& c);
/// Reads and validates a config file; unknown keys and missing referenced files are fatal.
PipelineConfig load_pipeline_config(const std::filesystem::path& file);

}  // namespace forenx
