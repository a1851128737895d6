#include "forenx/pipeline.hpp"

#include <cstdio>
#include <sstream>

#include "forenx/checkpoint.hpp"
#include "forenx/resources.hpp"

namespace forenx {

Backends::Backends(const PipelineConfig& cfg) {
    const bool any_live = cfg.clients.captioner == "live" || cfg.clients.summarizer == "live" ||
                          cfg.clients.judge == "live";
    if (any_live) {
        chat_ = std::make_unique<ChatClient>(cfg.clients.live);
        log_ = std::make_unique<RequestLog>(cfg.work_dir() / "judge_requests.jsonl");
    }
    if (cfg.clients.captioner == "live") {
        captioner_ = std::make_unique<LiveCaptioner>(*chat_);
    } else {
        captioner_ = std::make_unique<MockCaptioner>();
    }
    if (cfg.clients.summarizer == "live") {
        summarizer_ = std::make_unique<LiveSummarizer>(*chat_);
    } else {
        summarizer_ = std::make_unique<MockSummarizer>();
    }
    if (cfg.clients.judge == "live") {
        judge_ = std::make_unique<LiveJudge>(*chat_, log_.get());
    } else {
        judge_ = std::make_unique<MockJudge>();
    }
}

// ---- Dataset builds ----------------------------------------------------------------------------

namespace {

std::mt19937_64 split_rng(std::uint64_t seed, const std::string& split) {
    std::seed_seq s{seed, static_cast<std::uint64_t>(split == "train" ? 1 : 2)};
    return std::mt19937_64(s);
}

void finish_build(const PipelineConfig& cfg, DatasetBuild& build) {
    for (const auto& [split, records] : build.splits) {
        for (const auto& r : records) ++build.counts[{split, r.sample.source}];
        const auto file = cfg.dataset_path(split);
        write_dataset(file, records);
        build.files.push_back(file);
    }
}

}  // namespace

DatasetBuild build_synthetic_dataset(const PipelineConfig& cfg, const std::vector<ArtifactKind>& train_kinds,
                                     Backends& backends) {
    if (train_kinds.empty()) throw ValidationError("synthetic build needs at least one training kind");
    std::vector<ArtifactKind> test_kinds;
    for (const auto& k : cfg.synthetic.test_kinds) test_kinds.push_back(parse_artifact_kind(k));
    const auto work = cfg.work_dir();
    std::filesystem::create_directories(work / "images");

    DatasetBuild build;
    auto add_split = [&](const std::string& split, const std::vector<ArtifactKind>& kinds, std::size_t n) {
        auto rng = split_rng(cfg.seed, split);
        auto& records = build.splits[split];
        for (ArtifactKind kind : kinds) {
            for (auto& s : gen_synthetic_dataset(cfg.seed, n, kind, split, cfg.model.image_size)) {
                write_ppm(work / s.sample.image, s.image);
                records.push_back(make_record(s.sample, s.image, backends.captioner(), kTrainingPrompt, rng));
            }
        }
    };
    add_split("train", train_kinds, cfg.synthetic.n_train);
    if (!test_kinds.empty()) add_split("test", test_kinds, cfg.synthetic.n_test);
    finish_build(cfg, build);
    return build;
}

DatasetBuild build_manifest_dataset(const PipelineConfig& cfg, Backends& backends) {
    if (cfg.paths.images.empty()) {
        throw ValidationError("config key 'paths.images': required for a manifest build (or pass --synthetic)");
    }
    const auto manifest = cfg.resolve(cfg.paths.images);
    const auto manifest_dir = std::filesystem::absolute(manifest).parent_path();
    const auto work = std::filesystem::absolute(cfg.work_dir());
    std::filesystem::create_directories(work);

    std::map<std::string, std::vector<BoxAnnotation>> annotations;
    if (!cfg.paths.annotations.empty()) {
        for (auto& a : read_annotations(cfg.resolve(cfg.paths.annotations))) annotations[a.image_id].push_back(a);
    }

    DatasetBuild build;
    std::map<std::string, std::mt19937_64> rngs;
    for (ImageSample sample : read_manifest(manifest)) {
        std::filesystem::path file = sample.image;
        if (file.is_relative()) file = manifest_dir / file;
        const Image image = read_ppm(file);
        sample.image = std::filesystem::relative(file, work).generic_string();
        std::optional<std::string> reason;
        if (auto it = annotations.find(sample.id); it != annotations.end()) {
            std::vector<EvidencePair> pairs;
            for (const auto& a : it->second) {
                auto e = evidence_from(a);
                pairs.insert(pairs.end(), e.begin(), e.end());
            }
            reason = summarize_annotations(sample.id, pairs, backends.summarizer());
        }
        auto rng_it = rngs.try_emplace(sample.split, split_rng(cfg.seed, sample.split)).first;
        build.splits[sample.split].push_back(
            make_record(sample, image, backends.captioner(), kTrainingPrompt, rng_it->second, reason));
    }

    if (!annotations.empty()) {
        std::vector<ConversationRecord> annotated, real_pool, fake_pool;
        for (auto& r : build.splits["train"]) {
            if (r.has_reason()) {
                annotated.push_back(std::move(r));
            } else if (r.sample.label == Label::Real) {
                real_pool.push_back(std::move(r));
            } else {
                fake_pool.push_back(std::move(r));
            }
        }
        ForgReasonCounts counts{cfg.forgreason.annotated, cfg.forgreason.real, cfg.forgreason.fake};
        build.splits["train"] = assemble_forgreason(annotated, real_pool, fake_pool, counts, cfg.seed);
    }
    finish_build(cfg, build);
    return build;
}

// ---- Training -------------------------------------------------------------------------------------

namespace {

LoadedDataset load_split(const PipelineConfig& cfg, const std::string& split) {
    const auto file = cfg.dataset_path(split);
    if (!std::filesystem::exists(file)) {
        throw ValidationError("dataset " + file.string() + " not found; run 'forenx build-dataset' first");
    }
    return load_dataset_with_images(file);
}

}  // namespace

TrainOutcome run_pretrain(const PipelineConfig& cfg) {
    if (!cfg.model.enable_llm) throw ValidationError("pretraining requires model.enable_llm");
    const auto file = cfg.dataset_path("train");
    if (!std::filesystem::exists(file)) {
        throw ValidationError("dataset " + file.string() + " not found; run 'forenx build-dataset' first");
    }
    LoadedDataset text_only;
    text_only.records = read_dataset(file);
    const auto corpus = warmup_corpus(text_only, resources::kDefaultSystemPrompt);

    ForenxModel model(cfg.model);
    PretrainPlan plan = cfg.pretrain;
    plan.seed = cfg.seed;
    std::filesystem::create_directories(cfg.work_dir());
    MetricsLog log(cfg.work_dir() / "pretrain_metrics.jsonl");
    TrainOutcome out;
    out.final_loss = pretrain_language(model, corpus, plan, &log);
    out.steps = plan.steps;
    out.checkpoint = cfg.foundation_path();
    save_checkpoint(model, 0, out.checkpoint);
    return out;
}

std::unique_ptr<ForenxModel> load_model_checked(const std::filesystem::path& checkpoint,
                                                const std::optional<ModelConfig>& expected) {
    if (!std::filesystem::exists(checkpoint)) throw ValidationError("checkpoint " + checkpoint.string() + " not found");
    CheckpointInfo info;
    auto model = load_checkpoint(checkpoint, &info);
    if (expected) {
        const std::string want = config_fingerprint(*expected);
        if (info.fingerprint != want) {
            throw ValidationError("checkpoint " + checkpoint.string() + " has config fingerprint " +
                                  info.fingerprint.substr(0, 12) + ", config expects " + want.substr(0, 12));
        }
    }
    return model;
}

TrainOutcome run_train(const PipelineConfig& cfg, int stage) {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2, got " + std::to_string(stage));
    std::unique_ptr<ForenxModel> model;
    if (stage == 1) {
        model = build_model(cfg.model, cfg.lora, cfg.seed);
        if (cfg.model.enable_llm && cfg.pretrain.steps > 0) {
            const auto foundation = cfg.foundation_path();
            if (!std::filesystem::exists(foundation)) run_pretrain(cfg);
            if (read_checkpoint_info(foundation).fingerprint != config_fingerprint(cfg.model)) {
                throw ValidationError("foundation checkpoint " + foundation.string() +
                                      " was built for a different model config; rerun 'forenx pretrain'");
            }
            load_groups(*model, foundation, {ParamGroup::LanguageBase});
        }
    } else {
        const auto prev = cfg.checkpoint_path(1);
        if (!std::filesystem::exists(prev)) {
            throw ValidationError("stage 2 needs the stage-1 checkpoint " + prev.string() +
                                  "; run 'forenx train --stage 1' first");
        }
        model = load_model_checked(prev, cfg.model);
    }

    const LoadedDataset data = load_split(cfg, "train");
    const auto examples = training_examples(data, resources::kDefaultSystemPrompt);
    const StageSettings& settings = stage == 1 ? cfg.stage1 : cfg.stage2;
    const StagePlan plan = settings.plan(stage, cfg.model, cfg.seed);
    TrainState state(cfg.seed);
    MetricsLog log(cfg.work_dir() / ("stage" + std::to_string(stage) + "_metrics.jsonl"));
    const TrainResult r = train(plan, examples, *model, state, &log);

    TrainOutcome out;
    out.steps = r.steps;
    out.final_loss = r.final_loss;
    out.detection_accuracy = detection_accuracy(*model, examples);
    out.checkpoint = cfg.checkpoint_path(stage);
    save_checkpoint(*model, stage, out.checkpoint);
    return out;
}

// ---- Reports --------------------------------------------------------------------------------------

std::vector<std::string> expand_prompts(const std::string& prompt) {
    std::vector<std::string> out;
    if (prompt == "all") {
        for (const auto& p : resources::kDetectionPrompts) out.emplace_back(p.version);
        return out;
    }
    detection_prompt(prompt);  // validates
    out.push_back(prompt);
    return out;
}

void write_eval_reports(const std::filesystem::path& dir,
                        const std::vector<std::pair<std::string, EvaluationReport>>& reports) {
    for (const auto& [version, report] : reports) {
        write_file_atomic(dir / ("report_" + version + ".json"), report.dump());
    }
    write_file_atomic(dir / "table.txt", format_table(reports));
}

AblationSetup ablation_setup(const PipelineConfig& cfg) {
    AblationSetup s;
    s.base = cfg.model;
    s.lora = cfg.lora;
    s.stage1 = cfg.stage1;
    s.pretrain = cfg.pretrain;
    s.seed = cfg.seed;
    s.prompt_version = cfg.eval.prompt;
    s.eval.max_tokens = cfg.eval.max_tokens;
    return s;
}

void write_ablation_reports(const std::filesystem::path& dir, const std::vector<AblationRun>& runs) {
    Json all = Json::array();
    std::vector<std::pair<std::string, EvaluationReport>> rows;
    for (const auto& r : runs) {
        all.push_back(to_json(r));
        rows.emplace_back(r.config.name, r.report);
    }
    write_file_atomic(dir / "ablation.json", all.dump(2) + "\n");
    write_file_atomic(dir / "ablation_table.txt", format_table(rows));
}

namespace {

std::string pad_left(const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; }

}  // namespace

std::string judge_table(const std::vector<JudgeRecord>& records) {
    std::size_t w = 4;
    for (const auto& r : records) w = std::max(w, r.pair.id.size());
    std::ostringstream out;
    out << pad_left("Pair", w) << " | Comprehensiveness | Relevance | Similarity | Reasonableness |  Avg\n";
    auto row = [&](const std::string& name, const JudgeScore& s) {
        out << pad_left(name, w) << " | " << pad_left(format_fixed1(s.comprehensiveness), 17) << " | "
            << pad_left(format_fixed1(s.relevance), 9) << " | " << pad_left(format_fixed1(s.similarity), 10) << " | "
            << pad_left(format_fixed1(s.reasonableness), 14) << " | " << pad_left(format_fixed1(s.avg), 4) << "\n";
    };
    std::vector<JudgeScore> means;
    for (const auto& r : records) {
        row(r.pair.id, r.mean);
        means.push_back(r.mean);
    }
    if (!means.empty()) row("mean", average_iterations(means, false));
    return out.str();
}

std::string user_study_table(const std::map<std::string, std::array<double, 5>>& means) {
    std::size_t w = 6;
    for (const auto& [m, v] : means) w = std::max(w, m.size());
    std::ostringstream out;
    out << pad_left("Method", w);
    for (auto a : kUserStudyAspects) out << " | " << a;
    out << "\n";
    for (const auto& [m, v] : means) {
        out << pad_left(m, w);
        for (std::size_t a = 0; a < 5; ++a) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%.2f", v[a]);
            out << " | " << pad_left(buf, kUserStudyAspects[a].size());
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace forenx
