#include "forenx/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "forenx/resources.hpp"

namespace forenx {

const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::Fake: return "fake";
        case Verdict::Real: return "real";
        case Verdict::Abstain: return "abstain";
    }
    return "?";
}

ParseResult parse_answer(std::string_view text) {
    ParseResult r;
    r.raw = std::string(text);
    std::size_t i = 0;
    while (i < text.size() && !std::isalpha(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
    r.matched = std::string(text.substr(i, j - i));
    std::string word = r.matched;
    for (char& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (word == "yes") {
        r.verdict = Verdict::Fake;
    } else if (word == "no") {
        r.verdict = Verdict::Real;
    }
    return r;
}

double accuracy(std::span<const Verdict> predictions, std::span<const Label> labels) {
    if (predictions.empty()) throw ValidationError("accuracy: no predictions");
    if (predictions.size() != labels.size()) {
        throw ValidationError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                              std::to_string(labels.size()) + " labels");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const Verdict want = labels[i] == Label::Fake ? Verdict::Fake : Verdict::Real;
        correct += predictions[i] == want;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double mean_accuracy(std::span<const double> per_source) {
    if (per_source.empty()) throw ValidationError("mean_accuracy: no sources");
    double s = 0.0;
    for (double a : per_source) s += a;
    return s / static_cast<double>(per_source.size());
}

double round_half_up(double x, int decimals) {
    const double p = std::pow(10.0, decimals);
    // The epsilon keeps values like 71.85 (stored as 71.8499999...) on the upper side.
    return std::floor(x * p + 0.5 + 1e-9) / p;
}

std::string format_fixed1(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", round_half_up(x, 1));
    return buf;
}

// ---- Reports ------------------------------------------------------------------------

Json EvaluationReport::to_json() const {
    Json j;
    j["config_fingerprint"] = config_fingerprint;
    j["prompt_version"] = prompt_version;
    Json rows = Json::array();
    for (const auto& s : per_source) {
        rows.push_back({{"source", s.source},
                        {"n", s.n},
                        {"accuracy", round_half_up(s.accuracy, 1)},
                        {"abstain", s.abstain}});
    }
    j["per_source"] = rows;
    j["mAcc"] = round_half_up(macc, 1);
    return j;
}

std::string EvaluationReport::dump() const { return to_json().dump(2) + "\n"; }

std::string format_table(std::span<const std::pair<std::string, EvaluationReport>> rows) {
    std::vector<std::string> sources;
    for (const auto& [name, r] : rows) {
        for (const auto& s : r.per_source) {
            if (std::find(sources.begin(), sources.end(), s.source) == sources.end()) sources.push_back(s.source);
        }
    }
    std::sort(sources.begin(), sources.end(),
              [](const std::string& a, const std::string& b) { return source_rank(a) < source_rank(b); });

    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header{"Run"};
    header.insert(header.end(), sources.begin(), sources.end());
    header.push_back("mAcc");
    cells.push_back(header);
    for (const auto& [name, r] : rows) {
        std::vector<std::string> line{name};
        for (const auto& src : sources) {
            auto it = std::find_if(r.per_source.begin(), r.per_source.end(),
                                   [&](const SourceResult& s) { return s.source == src; });
            line.push_back(it == r.per_source.end() ? "-" : format_fixed1(it->accuracy));
        }
        line.push_back(format_fixed1(r.macc));
        cells.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells) {
        for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
    }
    std::ostringstream out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t c = 0; c < cells[r].size(); ++c) {
            const std::string& v = cells[r][c];
            const std::string pad(width[c] - v.size(), ' ');
            if (c == 0) {
                out << v << pad;
            } else {
                out << " | " << pad << v;
            }
        }
        out << "\n";
        if (r == 0) {
            for (std::size_t c = 0; c < width.size(); ++c) out << (c ? "-+-" : "") << std::string(width[c], '-');
            out << "\n";
        }
    }
    return out.str();
}

// ---- Evaluation -----------------------------------------------------------------------

EvaluationReport run_eval(const ForenxModel& model, const LoadedDataset& data, std::string_view prompt_version,
                          const EvalOptions& opts) {
    const resources::DetectionPrompt& prompt = detection_prompt(prompt_version);
    if (data.records.empty()) throw ValidationError("run_eval: dataset is empty");
    if (data.images.size() != data.records.size()) throw ValidationError("run_eval: images missing");

    struct Bucket {
        std::vector<Verdict> predictions;
        std::vector<Label> labels;
    };
    std::map<std::size_t, std::pair<std::string, Bucket>> buckets;  // keyed by registry rank
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const ImageSample& s = data.records[i].sample;
        if (!is_registered_source(s.source)) {
            throw ValidationError("run_eval: record '" + s.id + "' has unknown source '" + s.source + "'");
        }
        Verdict v;
        if (model.config().enable_llm) {
            v = parse_answer(model.generate(*data.images[i], prompt.system, prompt.user, opts.max_tokens)).verdict;
        } else {
            ag::NoGradGuard no_grad;
            v = model.detection_logit(*data.images[i]).scalar() > 0.0 ? Verdict::Fake : Verdict::Real;
        }
        auto& [name, bucket] = buckets[source_rank(s.source)];
        name = s.source;
        bucket.predictions.push_back(v);
        bucket.labels.push_back(s.label);
    }

    EvaluationReport report;
    report.config_fingerprint = config_fingerprint(model.config());
    report.prompt_version = std::string(prompt.version);
    std::vector<double> accs;
    for (const auto& [rank, entry] : buckets) {
        const auto& [name, bucket] = entry;
        SourceResult r;
        r.source = name;
        r.n = bucket.predictions.size();
        r.accuracy = accuracy(bucket.predictions, bucket.labels);
        r.abstain = static_cast<std::size_t>(
            std::count(bucket.predictions.begin(), bucket.predictions.end(), Verdict::Abstain));
        accs.push_back(r.accuracy);
        report.per_source.push_back(r);
    }
    report.macc = mean_accuracy(accs);
    return report;
}

std::vector<std::pair<std::string, EvaluationReport>> run_prompt_suite(const ForenxModel& model,
                                                                       const LoadedDataset& data,
                                                                       const EvalOptions& opts) {
    std::vector<std::pair<std::string, EvaluationReport>> out;
    for (const auto& p : resources::kDetectionPrompts) {
        out.emplace_back(std::string(p.version), run_eval(model, data, p.version, opts));
    }
    return out;
}

// ---- Ablation -------------------------------------------------------------------------------

ModelConfig AblationConfig::apply(ModelConfig base) const {
    base.enable_forensic_projector = enable_forensic_projector;
    base.enable_detection_loss = enable_detection_loss;
    base.enable_llm = enable_llm;
    base.enable_vision_lora = enable_vision_lora;
    base.detector_head = detector_head;
    base.forensic_mode = forensic_mode;
    base.embedding_mode = embedding_mode;
    base.validate();
    return base;
}

Json AblationConfig::to_json() const {
    return {{"name", name},
            {"enable_vision_lora", enable_vision_lora},
            {"enable_llm", enable_llm},
            {"enable_forensic_projector", enable_forensic_projector},
            {"enable_detection_loss", enable_detection_loss},
            {"detector_head", forenx::to_string(detector_head)},
            {"forensic_mode", forenx::to_string(forensic_mode)},
            {"embedding_mode", forenx::to_string(embedding_mode)}};
}

std::vector<AblationConfig> ablation_matrix() {
    std::vector<AblationConfig> rows;
    AblationConfig c;
    c.name = "all off";
    c.enable_vision_lora = false;
    c.enable_llm = false;
    c.enable_forensic_projector = false;
    c.enable_detection_loss = false;
    c.detector_head = DetectorHead::Mlp;
    rows.push_back(c);

    c.name = "w/o LLM";
    c.enable_vision_lora = true;
    rows.push_back(c);

    c.name = "w/o Forensics Projector";
    c.enable_llm = true;
    c.detector_head = DetectorHead::Sum;
    rows.push_back(c);

    c.name = "w/o L_detection";
    c.enable_forensic_projector = true;
    rows.push_back(c);

    c.name = "full";
    c.enable_detection_loss = true;
    rows.push_back(c);

    const AblationConfig full = c;
    auto variant = [&](const std::string& name, auto&& edit) {
        AblationConfig v = full;
        v.name = name;
        edit(v);
        rows.push_back(v);
    };
    variant("head=sum", [](AblationConfig& v) { v.detector_head = DetectorHead::Sum; });
    variant("head=mlp", [](AblationConfig& v) { v.detector_head = DetectorHead::Mlp; });
    variant("feature=pooler", [](AblationConfig& v) { v.forensic_mode = ForensicMode::Pooler; });
    variant("feature=all", [](AblationConfig& v) { v.forensic_mode = ForensicMode::All; });
    variant("embedding=vector", [](AblationConfig& v) { v.embedding_mode = EmbeddingMode::Vector; });
    variant("embedding=matrix", [](AblationConfig& v) { v.embedding_mode = EmbeddingMode::Matrix; });
    return rows;
}

std::vector<TextExample> warmup_corpus(const LoadedDataset& data, std::string_view system_prompt) {
    std::vector<TextExample> out;
    for (const auto& r : data.records) {
        for (std::size_t t = 0; t + 1 < r.turns.size(); t += 2) {
            out.push_back({std::string(system_prompt), r.turns[t].text, r.turns[t + 1].text});
        }
    }
    return out;
}

std::unique_ptr<ForenxModel> build_model(const ModelConfig& cfg, const LoraSpec& lora, std::uint64_t seed) {
    auto model = std::make_unique<ForenxModel>(cfg);
    std::mt19937_64 rng(seed);
    if (cfg.enable_vision_lora) apply_lora(*model, lora, Tower::Vision, rng);
    if (cfg.enable_llm) apply_lora(*model, lora, Tower::Language, rng);
    return model;
}

namespace {

void copy_group(const ForenxModel& from, ForenxModel& to, ParamGroup group) {
    std::map<std::string, const Matrix*> src;
    for (const auto& p : from.parameters()) {
        if (p.group == group) src[p.name] = &p.var.value();
    }
    for (const auto& p : to.parameters()) {
        if (p.group != group) continue;
        auto it = src.find(p.name);
        if (it == src.end()) throw ValidationError("warm-up weights lack '" + p.name + "'");
        p.var.node()->value = *it->second;
    }
}

}  // namespace

std::vector<AblationRun> run_ablation(const AblationSetup& setup, const LoadedDataset& train,
                                      const LoadedDataset& test) {
    const std::vector<Example> examples = training_examples(train, resources::kDefaultSystemPrompt);
    const std::vector<TextExample> corpus = warmup_corpus(train, resources::kDefaultSystemPrompt);
    std::map<std::size_t, std::unique_ptr<ForenxModel>> foundations;  // by forensic slot count

    std::vector<AblationRun> runs;
    for (const AblationConfig& row : ablation_matrix()) {
        ModelConfig cfg = row.apply(setup.base);
        cfg.init_seed = setup.seed;
        auto model = build_model(cfg, setup.lora, setup.seed);
        if (cfg.enable_llm && setup.pretrain.steps > 0) {
            const std::size_t k = cfg.forensic_token_count();
            auto& base = foundations[k];
            if (!base) {
                base = std::make_unique<ForenxModel>(cfg);
                PretrainPlan plan = setup.pretrain;
                plan.seed = setup.seed;
                pretrain_language(*base, corpus, plan);
            }
            copy_group(*base, *model, ParamGroup::LanguageBase);
        }
        model->reset_counters();

        AblationRun run;
        run.config = row;
        StagePlan plan = setup.stage1.plan(1, cfg, setup.seed);
        TrainState state(setup.seed);
        run.steps = forenx::train(plan, examples, *model, state).steps;
        run.train_detection_accuracy = detection_accuracy(*model, examples);
        run.report = run_eval(*model, test, setup.prompt_version, setup.eval);
        run.lm_forward_count = model->lm_forward_count();
        run.max_forensic_tokens = model->max_forensic_tokens_seen();
        runs.push_back(std::move(run));
    }
    return runs;
}

Json to_json(const AblationRun& run) {
    Json j = run.config.to_json();
    j["steps"] = run.steps;
    j["train_detection_accuracy"] = run.train_detection_accuracy;
    j["lm_forward_count"] = run.lm_forward_count;
    j["max_forensic_tokens"] = run.max_forensic_tokens;
    j["report"] = run.report.to_json();
    return j;
}

}  // namespace forenx
