#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "forenx/checkpoint.hpp"
#include "forenx/pipeline.hpp"
#include "forenx/service.hpp"

using namespace forenx;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

AnnotationService* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

PipelineConfig config_or_default(const std::string& path) {
    if (path.empty()) {
        PipelineConfig c = PipelineConfig::toy();
        c.base_dir = std::filesystem::current_path();
        return c;
    }
    return load_pipeline_config(path);
}

int cmd_build_dataset(const std::string& config, const std::string& synthetic) {
    const PipelineConfig cfg = load_pipeline_config(config);
    Backends backends(cfg);
    DatasetBuild build;
    if (!synthetic.empty()) {
        build = build_synthetic_dataset(cfg, {parse_artifact_kind(synthetic)}, backends);
    } else {
        build = build_manifest_dataset(cfg, backends);
    }
    for (const auto& [key, n] : build.counts) std::cout << key.first << "\t" << key.second << "\t" << n << "\n";
    for (const auto& f : build.files) std::cout << "wrote " << f.string() << "\n";
    return 0;
}

int cmd_pretrain(const std::string& config) {
    const PipelineConfig cfg = load_pipeline_config(config);
    const TrainOutcome out = run_pretrain(cfg);
    std::cout << "pretrain: " << out.steps << " steps, final loss " << out.final_loss << "\n"
              << "wrote " << out.checkpoint.string() << "\n";
    return 0;
}

int cmd_train(const std::string& config, int stage) {
    const PipelineConfig cfg = load_pipeline_config(config);
    const TrainOutcome out = run_train(cfg, stage);
    std::cout << "stage " << stage << ": " << out.steps << " steps, final loss " << out.final_loss
              << ", training detection accuracy " << format_fixed1(100.0 * out.detection_accuracy) << "%\n"
              << "wrote " << out.checkpoint.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& config, const std::string& checkpoint, const std::string& dataset,
             const std::string& prompt, std::string out_dir) {
    std::optional<ModelConfig> expected;
    EvalOptions opts;
    opts.max_tokens = PipelineConfig::toy().eval.max_tokens;
    if (!config.empty()) {
        const PipelineConfig cfg = load_pipeline_config(config);
        expected = cfg.model;
        opts.max_tokens = cfg.eval.max_tokens;
        if (out_dir.empty()) out_dir = cfg.reports_dir().string();
    }
    if (out_dir.empty()) out_dir = (std::filesystem::path(checkpoint).parent_path() / "reports").string();
    const auto versions = expand_prompts(prompt);
    auto model = load_model_checked(checkpoint, expected);
    const LoadedDataset data = load_dataset_with_images(dataset);
    std::vector<std::pair<std::string, EvaluationReport>> reports;
    for (const auto& v : versions) reports.emplace_back(v, run_eval(*model, data, v, opts));
    write_eval_reports(out_dir, reports);
    std::cout << format_table(reports) << "wrote " << reports.size() << " report(s) to " << out_dir << "\n";
    return 0;
}

int cmd_ablate(const std::string& config) {
    const PipelineConfig cfg = load_pipeline_config(config);
    const LoadedDataset train = load_dataset_with_images(cfg.dataset_path("train"));
    const LoadedDataset test = load_dataset_with_images(cfg.dataset_path("test"));
    const auto runs = run_ablation(ablation_setup(cfg), train, test);
    write_ablation_reports(cfg.reports_dir(), runs);
    std::vector<std::pair<std::string, EvaluationReport>> rows;
    for (const auto& r : runs) rows.emplace_back(r.config.name, r.report);
    std::cout << format_table(rows) << "wrote " << (cfg.reports_dir() / "ablation.json").string() << "\n";
    return 0;
}

int cmd_judge(const std::string& config, const std::string& pairs_file, std::size_t iterations, std::string out) {
    const PipelineConfig cfg = config_or_default(config);
    Backends backends(cfg);
    const auto pairs = read_judge_pairs(pairs_file);
    const auto records = judge_pairs(pairs, backends.judge(), iterations);
    if (out.empty()) {
        std::filesystem::path p(pairs_file);
        out = (p.parent_path() / (p.stem().string() + "_judged.jsonl")).string();
    }
    std::string body;
    for (const auto& r : records) body += to_json(r).dump() + "\n";
    write_file_atomic(out, body);
    std::cout << judge_table(records) << "wrote " << out << "\n";
    return 0;
}

int cmd_wordfreq(const std::string& annotations, std::size_t top, const std::string& out) {
    std::vector<std::string> reasons;
    for (const auto& a : read_annotations(annotations)) {
        for (const auto& b : a.boxes) reasons.push_back(b.reason);
    }
    auto freq = word_frequency(reasons);
    if (top > 0 && freq.size() > top) freq.resize(top);
    Json j = Json::array();
    for (const auto& [w, n] : freq) {
        std::cout << w << "\t" << n << "\n";
        j.push_back({{"word", w}, {"count", n}});
    }
    if (!out.empty()) write_file_atomic(out, j.dump(2) + "\n");
    return 0;
}

int cmd_user_study(const std::string& ratings) {
    std::cout << user_study_table(aggregate_user_study(read_user_study(ratings)));
    return 0;
}

int cmd_serve(const std::string& config, std::string dataset, const std::string& host, int port) {
    const PipelineConfig cfg = load_pipeline_config(config);
    if (dataset.empty()) dataset = cfg.dataset_path("train").string();
    Backends backends(cfg);
    AnnotationStore store(annotation_queue(dataset), cfg.annotations_dir(), backends.summarizer());
    AnnotationService service(store, cfg.service.ui_dir.empty() ? std::filesystem::path{} : cfg.resolve(cfg.service.ui_dir));
    const int bound = service.bind(host.empty() ? cfg.service.host : host, port >= 0 ? port : cfg.service.port);
    std::cout << "serving " << store.images().size() << " images on port " << bound << std::endl;
    g_service = &service;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    service.listen();
    g_service = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Forensic multimodal detector: dataset, training, evaluation and annotation tools"};
    app.require_subcommand(1);

    std::string config, synthetic, checkpoint, dataset, prompt = "v1", out, pairs, annotations, ratings, host;
    int stage = 0, port = -1;
    std::size_t iterations = 3, top = 0;

    auto* build = app.add_subcommand("build-dataset", "Build the conversation dataset");
    build->add_option("--config", config, "Pipeline config")->required()->check(CLI::ExistingFile);
    build->add_option("--synthetic", synthetic, "Synthetic artifact kind for the train split")
        ->check(CLI::IsMember({"A", "B"}));

    auto* pre = app.add_subcommand("pretrain", "Text-only warm-up of the language model");
    pre->add_option("--config", config, "Pipeline config")->required()->check(CLI::ExistingFile);

    auto* tr = app.add_subcommand("train", "Run a training stage");
    tr->add_option("--config", config, "Pipeline config")->required()->check(CLI::ExistingFile);
    tr->add_option("--stage", stage, "Stage (1 or 2)")->required()->check(CLI::IsMember({1, 2}));

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    ev->add_option("--dataset", dataset, "Dataset file")->required()->check(CLI::ExistingFile);
    ev->add_option("--prompt", prompt, "Prompt version v1..v5 or all")
        ->check(CLI::IsMember({"v1", "v2", "v3", "v4", "v5", "all"}));
    ev->add_option("--config", config, "Pipeline config; enables the fingerprint check")->check(CLI::ExistingFile);
    ev->add_option("--out", out, "Report directory");

    auto* ab = app.add_subcommand("ablate", "Run the ablation matrix");
    ab->add_option("--config", config, "Pipeline config")->required()->check(CLI::ExistingFile);

    auto* jd = app.add_subcommand("judge", "Score explanations against references");
    jd->add_option("--pairs", pairs, "JSONL of {id, generated, reference}")->required()->check(CLI::ExistingFile);
    jd->add_option("--iterations", iterations, "Judge iterations per pair")->check(CLI::PositiveNumber);
    jd->add_option("--config", config, "Pipeline config (judge backend)")->check(CLI::ExistingFile);
    jd->add_option("--out", out, "Judge record file");

    auto* wf = app.add_subcommand("wordfreq", "Word frequency of annotated reasons");
    wf->add_option("--annotations", annotations, "Annotation file")->required()->check(CLI::ExistingFile);
    wf->add_option("--top", top, "Keep only the N most frequent words");
    wf->add_option("--out", out, "JSON output file");

    auto* us = app.add_subcommand("user-study", "Aggregate user-study ratings");
    us->add_option("--ratings", ratings, "JSONL of ratings")->required()->check(CLI::ExistingFile);

    auto* sv = app.add_subcommand("serve", "Run the annotation backend");
    sv->add_option("--config", config, "Pipeline config")->required()->check(CLI::ExistingFile);
    sv->add_option("--dataset", dataset, "Dataset whose fake images form the queue");
    sv->add_option("--host", host, "Bind address");
    sv->add_option("--port", port, "Port (0 picks a free one)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    try {
        if (build->parsed()) return cmd_build_dataset(config, synthetic);
        if (pre->parsed()) return cmd_pretrain(config);
        if (tr->parsed()) return cmd_train(config, stage);
        if (ev->parsed()) return cmd_eval(config, checkpoint, dataset, prompt, out);
        if (ab->parsed()) return cmd_ablate(config);
        if (jd->parsed()) return cmd_judge(config, pairs, iterations, out);
        if (wf->parsed()) return cmd_wordfreq(annotations, top, out);
        if (us->parsed()) return cmd_user_study(ratings);
        if (sv->parsed()) return cmd_serve(config, dataset, host, port);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}
