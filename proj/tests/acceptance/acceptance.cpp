// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <httplib.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "forenx/adaptation.hpp"
#include "forenx/checkpoint.hpp"
#include "forenx/eval.hpp"
#include "forenx/hash.hpp"
#include "forenx/judge.hpp"
#include "forenx/pipeline.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace forenx;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
    if (!ok) throw Failure(what);
}

std::string fmt(double x, int precision = 3) {
    std::ostringstream s;
    s.precision(precision);
    s << x;
    return s.str();
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- 1, 2: reference aggregates ---------------------------------------------------------------

std::string metric_oracle() {
    const std::vector<double> diffusion{97.9, 97.8, 97.7, 97.4, 98.0, 98.0, 97.7, 97.8};
    const std::vector<double> gan{99.9, 94.8, 89.8, 98.6, 96.6, 93.2, 99.1, 83.2};
    const std::string a = format_fixed1(mean_accuracy(diffusion)), b = format_fixed1(mean_accuracy(gan));
    expect(a == "97.8", "diffusion row gave " + a);
    expect(b == "94.4", "gan row gave " + b);
    return "mAcc " + a + ", " + b;
}

std::string judge_oracle() {
    JudgeScore base{80.7, 71.4, 60.9, 74.1, 0.0}, ours{81.2, 75.0, 70.5, 77.2, 0.0};
    const std::string a = format_fixed1(base.recompute_avg().avg), b = format_fixed1(ours.recompute_avg().avg);
    expect(a == "71.8", "baseline row gave " + a);
    expect(b == "76.0", "proposed row gave " + b);
    // Three identical iterations must not move the mean.
    const JudgeScore m = average_iterations(std::vector<JudgeScore>(3, ours));
    expect(format_fixed1(m.avg) == "76.0", "iteration mean gave " + format_fixed1(m.avg));
    return "Avg " + a + ", " + b;
}

// ---- 3: gradient fidelity ---------------------------------------------------------------------

struct GradStats {
    double max_rel = 0.0;
    std::size_t entries = 0;
};

/// Reverse-mode gradient of `loss` against central differences for up to `cap` random entries
/// of every parameter in `groups`.
void grad_check(const ForenxModel& model, const std::set<ParamGroup>& groups, const std::function<ag::Var()>& loss,
                std::mt19937_64& rng, std::size_t cap, GradStats& stats) {
    const auto params = model.parameters();
    for (const auto& p : params) p.var.node()->grad = Matrix();
    ag::backward(loss());
    constexpr double h = 1e-5;
    for (const auto& p : params) {
        if (!groups.count(p.group)) continue;
        auto& value = p.var.node()->value.data;
        const Matrix analytic = p.var.grad();
        std::vector<std::size_t> idx(value.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (idx.size() > cap) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(cap);
        }
        for (std::size_t e : idx) {
            const double saved = value[e];
            ag::NoGradGuard ng;
            value[e] = saved + h;
            const double up = loss().scalar();
            value[e] = saved - h;
            const double down = loss().scalar();
            value[e] = saved;
            const double a = analytic.data.empty() ? 0.0 : analytic.data[e];
            const double rel = gradcheck::rel_error(a, (up - down) / (2 * h));
            if (rel > stats.max_rel) stats.max_rel = rel;
            ++stats.entries;
        }
    }
}

std::string gradient_fidelity() {
    constexpr int kFixtures = 24;
    GradStats det, joint;
    std::mt19937_64 rng(2024);
    for (int i = 0; i < kFixtures; ++i) {
        ModelConfig cfg = ModelConfig::toy();
        cfg.detector_head = DetectorHead::Mlp;
        cfg.embedding_mode = i % 2 ? EmbeddingMode::Matrix : EmbeddingMode::Vector;
        cfg.forensic_mode = (i / 2) % 2 ? ForensicMode::All : ForensicMode::Pooler;
        auto model = build_model(cfg, LoraSpec::toy(), 100 + i);
        perturb(*model, 200 + i, 0.2);
        const Image img = gen::image(rng);
        const int y = i % 3 == 0 ? 0 : 1;
        // L_detection against d and the mlp head.
        grad_check(*model, {ParamGroup::ForensicEmbedding, ParamGroup::DetectionHead},
                   [&] { return loss_detection(model->detection_logit(img), y); }, rng, 48, det);
        // The detection logit does not read the forensic projector; its weights are trained
        // through the joint stage-1 loss, so they are checked against that.
        const auto qa = gen_detection_qa(y ? Label::Fake : Label::Real, "v1");
        const Example ex{&img, std::string(detection_prompt("v1").system), qa.question, qa.answer, y};
        grad_check(*model, {ParamGroup::ForensicProjector, ParamGroup::TokenReducer},
                   [&] {
                       const ForwardOutput out = model->forward(ex);
                       return total_loss(loss_detection(out.detection_logit, y),
                                         loss_instruction(out.lm_logits, out.sequence), 1);
                   },
                   rng, 16, joint);
    }
    expect(det.max_rel < 1e-4, "L_detection max rel error " + fmt(det.max_rel));
    expect(joint.max_rel < 1e-4, "projector max rel error " + fmt(joint.max_rel));
    return std::to_string(kFixtures) + " fixtures; d+head " + std::to_string(det.entries) + " entries, max rel " +
           fmt(det.max_rel) + "; projector " + std::to_string(joint.entries) + " entries, max rel " +
           fmt(joint.max_rel);
}

// ---- 4: Hadamard / identity -------------------------------------------------------------------

std::string hadamard_identity() {
    std::mt19937_64 rng(5);
    int exact = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t width = 8 + 8 * (trial % 4);
        const Matrix f = gen::matrix(rng, trial % 2 ? 17 : 1, width, 10.0);
        for (EmbeddingMode m : {EmbeddingMode::Vector, EmbeddingMode::Matrix}) {
            const Matrix out = forensic_encode(ag::constant(f), ForensicEmbedding::identity(m, width)).value();
            expect(out.data == f.data, "identity encoding changed the features");
            ++exact;
        }
    }
    // The same holds inside the model: ones/identity d gives F_v^f equal to its input.
    for (EmbeddingMode m : {EmbeddingMode::Vector, EmbeddingMode::Matrix}) {
        ModelConfig cfg = ModelConfig::toy();
        cfg.embedding_mode = m;
        ForenxModel model(cfg);
        perturb(model, 3);
        for (const auto& p : model.parameters()) {
            if (p.group == ParamGroup::ForensicEmbedding)
                p.var.node()->value = ForensicEmbedding::identity(m, cfg.vision_width).d.value();
        }
        const Image img = gen::image(rng);
        const Matrix pooled = model.encode_image(img).pooled.value();
        const Matrix ff = model.forward({&img, "s", "q", std::nullopt, 1}).forensic_features.value();
        expect(ff.data == pooled.data, "model forensic features differ from pooled features under identity d");
    }
    double worst = 0.0;
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix x = gen::matrix(rng, 1, 32), z = gen::matrix(rng, 1, 32);
        const double a = u(rng), b = u(rng);
        Matrix c(1, 32);
        for (std::size_t i = 0; i < 32; ++i) c.data[i] = a * x.data[i] + b * z.data[i];
        auto head = [](const Matrix& m) { return detect(ag::constant(m), DetectorHead::Sum, nullptr).scalar(); };
        worst = std::max(worst, std::abs(head(c) - (a * head(x) + b * head(z))));
    }
    expect(worst <= 1e-9, "sum-head linearity error " + fmt(worst));
    return std::to_string(exact) + " exact identity encodings; sum-head linearity max error " + fmt(worst);
}

// ---- 5: LoRA ----------------------------------------------------------------------------------

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

std::string lora_contracts() {
    std::mt19937_64 rng(1);
    ModelConfig cfg = ModelConfig::toy();
    cfg.init_seed = 21;
    {
        ForenxModel model(cfg);
        perturb(model, 2, 0.1);
        std::vector<Image> images;
        std::vector<ForwardOutput> before;
        for (int i = 0; i < 10; ++i) {
            images.push_back(gen::image(rng));
            before.push_back(model.forward({&images.back(), "sys", "is it fake?", std::nullopt, 1}));
        }
        std::mt19937_64 lrng(3);
        apply_lora(model, LoraSpec::toy(), Tower::Vision, lrng);
        apply_lora(model, LoraSpec::toy(), Tower::Language, lrng);
        for (int i = 0; i < 10; ++i) {
            const ForwardOutput after = model.forward({&images[i], "sys", "is it fake?", std::nullopt, 1});
            expect(after.lm_logits.value().data == before[i].lm_logits.value().data, "zero-B changed LM logits");
            expect(after.detection_logit.value().data == before[i].detection_logit.value().data,
                   "zero-B changed the detection logit");
        }
    }
    ForenxModel model(cfg);
    perturb(model, 5, 0.1);
    std::mt19937_64 lrng(6);
    apply_lora(model, LoraSpec::toy(), Tower::Vision, lrng);
    apply_lora(model, LoraSpec::toy(), Tower::Language, lrng);
    for (auto& [name, proj] : model.block_projections()) {
        if (!proj->has_adapter()) continue;
        for (double& b : proj->adapter()->b.node()->value.data) b = std::normal_distribution<double>(0.0, 0.05)(rng);
    }
    std::vector<Image> images;
    std::vector<Matrix> embs, lm_before;
    std::vector<double> det_before;
    for (int i = 0; i < 100; ++i) {
        images.push_back(gen::image(rng));
        embs.push_back(gen::matrix(rng, 6, cfg.lm_width));
        det_before.push_back(model.detection_logit(images.back()).scalar());
        lm_before.push_back(model.language().forward(ag::constant(embs.back()), {}).value());
    }
    merge_lora(model, Tower::Vision);
    merge_lora(model, Tower::Language);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        worst = std::max(worst, rel(det_before[i], model.detection_logit(images[i]).scalar()));
        const Matrix after = model.language().forward(ag::constant(embs[i]), {}).value();
        for (std::size_t k = 0; k < after.data.size(); ++k) worst = std::max(worst, rel(lm_before[i].data[k], after.data[k]));
    }
    expect(worst < 1e-5, "merge relative error " + fmt(worst));
    return "zero-B bit-exact on 10 inputs; merge max rel error " + fmt(worst) + " on 100 inputs";
}

// ---- 6: two-stage freezing --------------------------------------------------------------------

std::string two_stage_freezing() {
    ToyData data(32, 8, ArtifactKind::A);
    ModelConfig cfg = ModelConfig::toy();
    cfg.detector_head = DetectorHead::Mlp;
    auto model = build_model(cfg, LoraSpec::toy(), 21);
    auto hash = [&](ParamGroup g) { return parameter_hash(*model, std::set<ParamGroup>{g}); };

    StagePlan s1 = StagePlan::for_stage(1, cfg);
    s1.max_steps = 5;
    s1.batch_size = 4;
    s1.learning_rate = 5e-3;
    const std::string d0 = hash(ParamGroup::ForensicEmbedding);
    TrainState st1(1);
    train(s1, data.examples, *model, st1);
    expect(d0 != hash(ParamGroup::ForensicEmbedding), "stage 1 left d unchanged");

    const std::vector<std::pair<std::string, ParamGroup>> frozen{
        {"vision backbone", ParamGroup::VisionBase},       {"vision adapters", ParamGroup::VisionLora},
        {"d", ParamGroup::ForensicEmbedding},              {"token reducer", ParamGroup::TokenReducer},
        {"forensic projector", ParamGroup::ForensicProjector}, {"content projector", ParamGroup::ContentProjector},
        {"detection head", ParamGroup::DetectionHead}};
    std::vector<std::string> before;
    for (const auto& [name, g] : frozen) before.push_back(hash(g));
    const std::string lora = hash(ParamGroup::LanguageLora);
    StagePlan s2 = StagePlan::for_stage(2, cfg);
    s2.max_steps = 50;
    s2.batch_size = 1;
    s2.learning_rate = 1e-3;
    TrainState st2(2);
    expect(train(s2, data.examples, *model, st2).steps == 50, "stage 2 did not run 50 steps");
    for (std::size_t i = 0; i < frozen.size(); ++i)
        expect(before[i] == hash(frozen[i].second), frozen[i].first + " changed during stage 2");
    expect(lora != hash(ParamGroup::LanguageLora), "stage 2 did not update the language adapters");
    return "stage 1 moved d; 50-step stage 2 left " + std::to_string(frozen.size()) + " groups byte-identical";
}

// ---- 7: end-to-end desk run -------------------------------------------------------------------

double checkerboard(const Image& img) {
    double s = 0.0;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) s += ((x + y) % 2 == 0 ? 1.0 : -1.0) * img.at(c, y, x);
    return s / static_cast<double>(img.pixels.size());
}

std::string end_to_end() {
    TempDir dir;
    PipelineConfig cfg = PipelineConfig::toy();
    cfg.base_dir = dir.path;
    cfg.synthetic.train_kinds = {"A"};
    cfg.synthetic.test_kinds = {"A", "B"};
    expect(cfg.stage1.max_steps <= 200, "stage-1 budget exceeds 200 steps");
    Backends backends(cfg);
    build_synthetic_dataset(cfg, {ArtifactKind::A}, backends);

    const LoadedDataset train_set = load_dataset_with_images(cfg.dataset_path("train"));
    double max_real = -INFINITY, min_fake = INFINITY;
    for (std::size_t i = 0; i < train_set.records.size(); ++i) {
        const double v = checkerboard(*train_set.images[i]);
        if (train_set.records[i].sample.label == Label::Fake) min_fake = std::min(min_fake, v);
        else max_real = std::max(max_real, v);
    }
    expect(max_real < min_fake, "closed-form separator does not certify the training set");

    const TrainOutcome out = run_train(cfg, 1);
    expect(out.steps <= 200, "stage 1 ran " + std::to_string(out.steps) + " steps");
    expect(out.detection_accuracy == 1.0, "training detection accuracy " + fmt(100 * out.detection_accuracy));

    auto model = load_model_checked(out.checkpoint, cfg.model);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < train_set.records.size(); ++i) {
        const bool fake = model->detection_logit(*train_set.images[i]).scalar() > 0.0;
        hits += fake == (train_set.records[i].sample.label == Label::Fake);
    }
    expect(hits == train_set.records.size(), "reloaded checkpoint misclassifies training images");

    const LoadedDataset test_set = load_dataset_with_images(cfg.dataset_path("test"));
    EvalOptions opts;
    opts.max_tokens = cfg.eval.max_tokens;
    write_eval_reports(cfg.reports_dir(), {{"v1", run_eval(*model, test_set, "v1", opts)}});
    const Json report = Json::parse(slurp(cfg.reports_dir() / "report_v1.json"));
    std::set<std::string> sources;
    double sum = 0.0;
    for (const auto& s : report.at("per_source")) {
        sources.insert(s.at("source").get<std::string>());
        sum += s.at("accuracy").get<double>();
    }
    expect(sources == std::set<std::string>{"synthetic-A", "synthetic-B"}, "report sources incomplete");
    const double macc = report.at("mAcc").get<double>();
    expect(std::isfinite(macc) && macc >= 0.0 && macc <= 100.0, "mAcc out of range");
    expect(std::abs(macc - sum / 2) <= 0.051, "mAcc is not the mean of per-source accuracies");
    return "separator gap " + fmt(min_fake - max_real) + "; 100% train detection after " + std::to_string(out.steps) +
           " steps; v1 mAcc " + format_fixed1(macc);
}

// ---- 8: round trips and CLI determinism -------------------------------------------------------

struct CliRun {
    int code = -1;
    std::string output;
};

CliRun cli(const std::filesystem::path& cwd, const std::string& args) {
    const std::string cmd = "cd '" + cwd.string() + "' && '" FORENX_CLI "' " + args + " 2>&1";
    FILE* p = ::popen(cmd.c_str(), "r");
    expect(p != nullptr, "popen failed");
    CliRun r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::string::size_type at;
    const std::string root = cwd.string();
    while ((at = r.output.find(root)) != std::string::npos) r.output.replace(at, root.size(), "<dir>");
    return r;
}

/// Runs `serve`, annotates and summarizes the first queued image, and returns the export.
std::string serve_session(const std::filesystem::path& cwd) {
    int fds[2];
    expect(::pipe(fds) == 0, "pipe failed");
    const pid_t pid = ::fork();
    if (pid == 0) {
        ::dup2(fds[1], 1);
        ::close(fds[0]);
        ::close(fds[1]);
        if (::chdir(cwd.c_str()) != 0) ::_exit(127);
        ::execl(FORENX_CLI, FORENX_CLI, "serve", "--config", "c.json", "--port", "0", static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(fds[1]);
    FILE* out = ::fdopen(fds[0], "r");
    char line[512] = {0};
    const bool got = std::fgets(line, sizeof line, out) != nullptr;
    std::string text = got ? line : "";
    const auto at = text.find("on port ");
    std::string body;
    std::string error;
    if (at == std::string::npos) {
        error = "serve did not start: " + text;
    } else {
        httplib::Client c("127.0.0.1", std::stoi(text.substr(at + 8)));
        c.set_read_timeout(10);
        const Json images = Json::parse(c.Get("/images")->body);
        const std::string id = images.at(0).at("id");
        const Json ann = {{"schema_version", 1},
                          {"image_id", id},
                          {"annotator", "acc"},
                          {"timestamp", "2026-01-01T00:00:00Z"},
                          {"boxes", Json::array({{{"x0", 0.1}, {"y0", 0.2}, {"x1", 0.6}, {"y1", 0.5},
                                                   {"reason", "repeating grid texture"}}})}};
        auto posted = c.Post("/annotations", ann.dump(), "application/json");
        auto summ = c.Post("/summarize/" + id, "", "application/json");
        if (!posted || posted->status != 200 || !summ || summ->status != 200) error = "serve rejected the session";
        else body = c.Get("/export")->body;
    }
    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
    std::fclose(out);
    expect(error.empty(), error);
    expect(WIFEXITED(status) && WEXITSTATUS(status) == 0, "serve did not exit cleanly");
    return body;
}

std::map<std::string, std::string> tree_hashes(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = sha256_file(e.path());
    }
    return out;
}

/// Every CLI command on a small config; returns the normalized transcript.
std::string cli_session(const std::filesystem::path& dir) {
    PipelineConfig c = PipelineConfig::toy();
    c.seed = 9;
    c.pretrain.steps = 10;
    c.stage1.max_steps = 6;
    c.stage2.max_steps = 3;
    c.synthetic.n_train = 8;
    c.synthetic.n_test = 4;
    c.eval.max_tokens = 4;
    std::ofstream(dir / "c.json") << to_json(c).dump(2);

    std::ofstream(dir / "pairs.jsonl") << R"({"id":"p1","generated":"blurry fingers and warped text","reference":"warped text on the sign"})"
                                       << "\n"
                                       << R"({"id":"p2","generated":"natural light","reference":"consistent shadows"})"
                                       << "\n";
    std::ofstream(dir / "ratings.jsonl") << to_json(UserRating{"r1", "ours", "i1", {5, 4, 4, 3, 5}, 0}).dump() << "\n"
                                         << to_json(UserRating{"r2", "base", "i1", {2, 3, 2, 3, 2}, 1}).dump() << "\n";

    std::string transcript;
    auto step = [&](const std::string& args) {
        const CliRun r = cli(dir, args);
        expect(r.code == 0, "'" + args + "' exited " + std::to_string(r.code) + ": " + r.output);
        transcript += "$ " + args + "\n" + r.output;
    };
    step("build-dataset --config c.json --synthetic A");
    step("pretrain --config c.json");
    step("train --config c.json --stage 1");
    step("train --config c.json --stage 2");
    step("eval --config c.json --checkpoint work/stage2.ckpt --dataset work/dataset_test.jsonl --prompt all");
    step("ablate --config c.json");
    step("judge --pairs pairs.jsonl --iterations 3 --out work/judged.jsonl");
    step("user-study --ratings ratings.jsonl");
    transcript += serve_session(dir);
    return transcript;
}

std::string round_trips() {
    // QA identity for every version and label.
    int qa = 0;
    for (int v = 1; v <= 5; ++v)
        for (Label l : {Label::Real, Label::Fake}) {
            const auto pair = gen_detection_qa(l, "v" + std::to_string(v));
            const Verdict want = l == Label::Fake ? Verdict::Fake : Verdict::Real;
            expect(parse_answer(pair.answer).verdict == want, "QA round trip failed for v" + std::to_string(v));
            ++qa;
        }

    TempDir a, b;
    const std::string ta = cli_session(a.path), tb = cli_session(b.path);
    expect(ta == tb, "CLI transcripts differ between runs");

    // Annotation export from the service, then word frequency and a manifest build with reasons.
    for (const TempDir* d : {&a, &b}) {
        std::vector<BoxAnnotation> anns;
        for (const auto& e : std::filesystem::directory_iterator(d->path / "work" / "annotations")) {
            const Json j = Json::parse(slurp(e.path()));
            for (const auto& x : j.at("annotations")) anns.push_back(annotation_from_json(x));
        }
        write_annotations(d->path / "ann.jsonl", anns);
        std::ofstream manifest(d->path / "manifest.jsonl");
        for (const auto& r : read_dataset(d->path / "work" / "dataset_train.jsonl")) {
            manifest << Json({{"id", r.sample.id},
                              {"image", "work/" + r.sample.image},
                              {"label", to_string(r.sample.label)},
                              {"source", r.sample.source},
                              {"split", r.sample.split}})
                            .dump()
                     << "\n";
        }
        manifest.close();
        Json cj = Json::parse(slurp(d->path / "c.json"));
        cj["paths"]["work_dir"] = "work_manifest";
        cj["paths"]["images"] = "manifest.jsonl";
        cj["paths"]["annotations"] = "ann.jsonl";
        cj["forgreason"] = {{"annotated", anns.size()}, {"real", 2}, {"fake", 1}};
        std::ofstream(d->path / "m.json") << cj.dump(2);
        for (const std::string args : {"build-dataset --config m.json", "wordfreq --annotations ann.jsonl --out work/wf.json"}) {
            const CliRun r = cli(d->path, args);
            expect(r.code == 0, "'" + args + "' exited " + std::to_string(r.code) + ": " + r.output);
        }
    }
    const auto ha = tree_hashes(a.path), hb = tree_hashes(b.path);
    expect(ha.size() == hb.size(), "runs produced different file sets");
    for (const auto& [file, h] : ha) {
        expect(hb.count(file) && hb.at(file) == h, "file differs between runs: " + file);
    }
    for (const char* f : {"work/dataset_train.jsonl", "work/stage2.ckpt", "work/reports/ablation.json",
                          "work/reports/report_v5.json", "work/judged.jsonl", "work/wf.json",
                          "work_manifest/dataset_train.jsonl"})
        expect(ha.count(f) == 1, std::string("missing output ") + f);

    // File round trips with identical hashes.
    std::size_t files = 0;
    for (const std::string f : {"work/dataset_train.jsonl", "work/dataset_test.jsonl", "work_manifest/dataset_train.jsonl"}) {
        const auto recs = read_dataset(a / f);
        write_dataset(a / "rt.jsonl", recs);
        expect(sha256_file(a / "rt.jsonl") == sha256_file(a / f), f + " changed on write-read-write");
        ++files;
    }
    write_annotations(a / "rt.ann", read_annotations(a / "ann.jsonl"));
    expect(sha256_file(a / "rt.ann") == sha256_file(a / "ann.jsonl"), "annotation file changed on round trip");
    ++files;
    return std::to_string(qa) + " QA round trips; " + std::to_string(files) + " file round trips; " +
           std::to_string(ha.size()) + " output files identical across two CLI runs of every command";
}

// ---- 9: ablation structure --------------------------------------------------------------------

std::string ablation_structure() {
    const LoadedDataset train_set = loaded_dataset(7, 8, {ArtifactKind::A}, "train");
    const LoadedDataset test_set = loaded_dataset(8, 4, {ArtifactKind::A, ArtifactKind::B});
    PipelineConfig cfg = PipelineConfig::toy();
    cfg.pretrain.steps = 20;
    cfg.stage1.max_steps = 10;
    cfg.eval.max_tokens = 4;
    const auto runs = run_ablation(ablation_setup(cfg), train_set, test_set);
    expect(runs.size() == 11, "ablation produced " + std::to_string(runs.size()) + " runs");
    bool saw_proj = false, saw_off = false;
    for (const auto& r : runs) {
        expect(r.report.per_source.size() == 2, r.config.name + " report lacks sources");
        if (r.config.name == "w/o Forensics Projector") {
            saw_proj = true;
            expect(r.max_forensic_tokens == 0, "forensic tokens present without the projector");
        }
        if (r.config.name == "all off") {
            saw_off = true;
            expect(r.lm_forward_count == 0, "LM ran in the all-off configuration");
        }
    }
    expect(saw_proj && saw_off, "ablation rows missing");
    return "11 runs; no-projector run forensic tokens 0; all-off LM forwards 0";
}

struct Criterion {
    std::string name;
    double budget_s;
    std::function<std::string()> run;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {"metric oracle", 1.0, metric_oracle},
        {"judge aggregation oracle", 1.0, judge_oracle},
        {"gradient fidelity", 120.0, gradient_fidelity},
        {"hadamard and identity", 60.0, hadamard_identity},
        {"lora contracts", 60.0, lora_contracts},
        {"two-stage freezing", 120.0, two_stage_freezing},
        {"end-to-end desk run", 600.0, end_to_end},
        {"round trips and cli determinism", 600.0, round_trips},
        {"ablation structure", 600.0, ablation_structure},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto& c = criteria[i];
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            detail = c.run();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (ok && secs > c.budget_s) {
            ok = false;
            detail += "; exceeded " + fmt(c.budget_s) + " s budget";
        }
        failed += !ok;
        std::printf("%s  %zu. %s (%.2fs): %s\n", ok ? "PASS" : "FAIL", i + 1, c.name.c_str(), secs, detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed ? 1 : 0;
}
