#include "forenx/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "forenx/hash.hpp"
#include "forenx/resources.hpp"

namespace forenx {

namespace cfg {

std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

void expect_object(const Json& j, const std::string& path) {
    if (!j.is_object()) throw ValidationError("config key '" + path + "': expected an object");
}

void reject_unknown(const Json& j, std::initializer_list<const char*> allowed, const std::string& path) {
    expect_object(j, path);
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw ValidationError("unknown config key '" + join(path, it.key()) + "'");
    }
}

namespace {

[[noreturn]] void type_error(const std::string& key, const char* expected) {
    throw ValidationError("config key '" + key + "': expected " + expected);
}

void read_bool(const Json& j, const char* key, bool& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_boolean()) type_error(join(path, key), "a boolean");
    out = v.get<bool>();
}

void read_double(const Json& j, const char* key, double& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number()) type_error(join(path, key), "a number");
    out = v.get<double>();
}

template <typename U>
void read_unsigned(const Json& j, const char* key, U& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number_unsigned()) type_error(join(path, key), "a non-negative integer");
    out = static_cast<U>(v.get<std::uint64_t>());
}

void read_int(const Json& j, const char* key, int& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_number_integer()) type_error(join(path, key), "an integer");
    out = v.get<int>();
}

void read_string(const Json& j, const char* key, std::string& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_string()) type_error(join(path, key), "a string");
    out = v.get<std::string>();
}

void read_path(const Json& j, const char* key, std::filesystem::path& out, const std::string& path) {
    std::string s = out.string();
    read_string(j, key, s, path);
    out = s;
}

void read_strings(const Json& j, const char* key, std::vector<std::string>& out, const std::string& path) {
    if (!j.contains(key)) return;
    const Json& v = j.at(key);
    if (!v.is_array()) type_error(join(path, key), "an array of strings");
    std::vector<std::string> vals;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_string()) type_error(join(path, key) + "[" + std::to_string(i) + "]", "a string");
        vals.push_back(v[i].get<std::string>());
    }
    out = std::move(vals);
}

template <typename Enum>
void read_enum(const Json& j, const char* key, Enum& out, const std::string& path,
               Enum (*parse)(const std::string&)) {
    if (!j.contains(key)) return;
    std::string s;
    read_string(j, key, s, path);
    try {
        out = parse(s);
    } catch (const ValidationError& e) {
        throw ValidationError("config key '" + join(path, key) + "': " + e.what());
    }
}

void check_backend(const std::string& value, const std::string& key) {
    if (value != "mock" && value != "live") {
        throw ValidationError("config key '" + key + "': backend must be 'mock' or 'live', got '" + value + "'");
    }
}

}  // namespace
}  // namespace cfg

// ---- ModelConfig ----------------------------------------------------------------

Json to_json(const ModelConfig& c) {
    Json j;
    j["profile"] = c.profile;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["channels"] = c.channels;
    j["vision_width"] = c.vision_width;
    j["vision_layers"] = c.vision_layers;
    j["vision_heads"] = c.vision_heads;
    j["lm_width"] = c.lm_width;
    j["lm_layers"] = c.lm_layers;
    j["lm_heads"] = c.lm_heads;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["forensic_tokens_all"] = c.forensic_tokens_all;
    j["forensic_mode"] = to_string(c.forensic_mode);
    j["embedding_mode"] = to_string(c.embedding_mode);
    j["detector_head"] = to_string(c.detector_head);
    j["forensic_placement"] = to_string(c.forensic_placement);
    j["enable_forensic_projector"] = c.enable_forensic_projector;
    j["enable_detection_loss"] = c.enable_detection_loss;
    j["enable_llm"] = c.enable_llm;
    j["enable_vision_lora"] = c.enable_vision_lora;
    j["instruction_grad_to_embedding"] = c.instruction_grad_to_embedding;
    j["init_std"] = c.init_std;
    j["init_seed"] = c.init_seed;
    j["zero_init_lm_head"] = c.zero_init_lm_head;
    return j;
}

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
    using namespace cfg;
    reject_unknown(j,
                   {"profile", "image_size", "patch_size", "channels", "vision_width", "vision_layers",
                    "vision_heads", "lm_width", "lm_layers", "lm_heads", "vocab_size", "max_seq_len",
                    "forensic_tokens_all", "forensic_mode", "embedding_mode", "detector_head",
                    "forensic_placement", "enable_forensic_projector", "enable_detection_loss",
                    "enable_llm", "enable_vision_lora", "instruction_grad_to_embedding", "init_std",
                    "init_seed", "zero_init_lm_head"},
                   path);
    std::string profile = "toy";
    read_string(j, "profile", profile, path);
    ModelConfig c;
    if (profile == "full-shape") {
        c = ModelConfig::full_shape();
    } else if (profile != "toy") {
        throw ValidationError("config key '" + join(path, "profile") + "': must be 'toy' or 'full-shape'");
    }
    read_unsigned(j, "image_size", c.image_size, path);
    read_unsigned(j, "patch_size", c.patch_size, path);
    read_unsigned(j, "channels", c.channels, path);
    read_unsigned(j, "vision_width", c.vision_width, path);
    read_unsigned(j, "vision_layers", c.vision_layers, path);
    read_unsigned(j, "vision_heads", c.vision_heads, path);
    read_unsigned(j, "lm_width", c.lm_width, path);
    read_unsigned(j, "lm_layers", c.lm_layers, path);
    read_unsigned(j, "lm_heads", c.lm_heads, path);
    read_unsigned(j, "vocab_size", c.vocab_size, path);
    read_unsigned(j, "max_seq_len", c.max_seq_len, path);
    read_unsigned(j, "forensic_tokens_all", c.forensic_tokens_all, path);
    read_enum(j, "forensic_mode", c.forensic_mode, path, &parse_forensic_mode);
    read_enum(j, "embedding_mode", c.embedding_mode, path, &parse_embedding_mode);
    read_enum(j, "detector_head", c.detector_head, path, &parse_detector_head);
    read_enum(j, "forensic_placement", c.forensic_placement, path, &parse_forensic_placement);
    read_bool(j, "enable_forensic_projector", c.enable_forensic_projector, path);
    read_bool(j, "enable_detection_loss", c.enable_detection_loss, path);
    read_bool(j, "enable_llm", c.enable_llm, path);
    read_bool(j, "enable_vision_lora", c.enable_vision_lora, path);
    read_bool(j, "instruction_grad_to_embedding", c.instruction_grad_to_embedding, path);
    read_double(j, "init_std", c.init_std, path);
    read_unsigned(j, "init_seed", c.init_seed, path);
    read_bool(j, "zero_init_lm_head", c.zero_init_lm_head, path);
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ValidationError("config key '" + path + "': " + e.what());
    }
    return c;
}

std::string config_fingerprint(const ModelConfig& c) { return sha256_hex(to_json(c).dump()); }

// ---- LoraSpec -----------------------------------------------------------------------

Json to_json(const LoraSpec& s) {
    Json j;
    j["r"] = s.rank;
    j["alpha"] = s.alpha;
    j["dropout"] = s.dropout;
    j["targets"] = s.targets;
    return j;
}

LoraSpec lora_spec_from_json(const Json& j, const std::string& path) {
    using namespace cfg;
    reject_unknown(j, {"r", "alpha", "dropout", "targets"}, path);
    LoraSpec s;
    read_int(j, "r", s.rank, path);
    read_double(j, "alpha", s.alpha, path);
    read_double(j, "dropout", s.dropout, path);
    read_strings(j, "targets", s.targets, path);
    try {
        s.validate();
    } catch (const ValidationError& e) {
        throw ValidationError("config key '" + path + "': " + e.what());
    }
    return s;
}

// ---- Stage settings ---------------------------------------------------------------

StagePlan StageSettings::plan(int stage, const ModelConfig& model, std::uint64_t seed) const {
    StagePlan p = StagePlan::for_stage(stage, model);
    p.learning_rate = learning_rate;
    p.batch_size = batch_size;
    p.epochs = epochs;
    p.max_steps = max_steps;
    p.clip_norm = clip_norm;
    p.weights = loss_weights;
    p.seed = seed;
    return p;
}

namespace {

Json to_json(const StageSettings& s) {
    Json j;
    j["learning_rate"] = s.learning_rate;
    j["batch_size"] = s.batch_size;
    j["epochs"] = s.epochs;
    j["max_steps"] = s.max_steps;
    j["clip_norm"] = s.clip_norm;
    j["loss_weights"] = {{"detection", s.loss_weights.detection},
                         {"instruction", s.loss_weights.instruction}};
    return j;
}

StageSettings stage_from_json(const Json& j, const std::string& path, StageSettings s) {
    using namespace cfg;
    reject_unknown(j, {"learning_rate", "batch_size", "epochs", "max_steps", "clip_norm", "loss_weights"},
                   path);
    read_double(j, "learning_rate", s.learning_rate, path);
    read_unsigned(j, "batch_size", s.batch_size, path);
    read_unsigned(j, "epochs", s.epochs, path);
    read_unsigned(j, "max_steps", s.max_steps, path);
    read_double(j, "clip_norm", s.clip_norm, path);
    if (j.contains("loss_weights")) {
        const std::string lp = join(path, "loss_weights");
        reject_unknown(j.at("loss_weights"), {"detection", "instruction"}, lp);
        read_double(j.at("loss_weights"), "detection", s.loss_weights.detection, lp);
        read_double(j.at("loss_weights"), "instruction", s.loss_weights.instruction, lp);
    }
    if (!(s.learning_rate > 0.0)) throw ValidationError("config key '" + join(path, "learning_rate") + "': must be positive");
    if (s.batch_size == 0) throw ValidationError("config key '" + join(path, "batch_size") + "': must be positive");
    return s;
}

}  // namespace

// ---- PipelineConfig ---------------------------------------------------------------

std::filesystem::path PipelineConfig::resolve(const std::filesystem::path& p) const {
    if (p.empty() || p.is_absolute()) return p;
    return base_dir / p;
}

std::filesystem::path PipelineConfig::dataset_path(const std::string& split) const {
    return work_dir() / ("dataset_" + split + ".jsonl");
}

std::filesystem::path PipelineConfig::checkpoint_path(int stage) const {
    return work_dir() / ("stage" + std::to_string(stage) + ".ckpt");
}

std::filesystem::path PipelineConfig::foundation_path() const {
    return paths.foundation_checkpoint.empty() ? checkpoint_path(0) : resolve(paths.foundation_checkpoint);
}

std::filesystem::path PipelineConfig::reports_dir() const { return work_dir() / "reports"; }
std::filesystem::path PipelineConfig::annotations_dir() const { return work_dir() / "annotations"; }

PipelineConfig PipelineConfig::toy() {
    PipelineConfig c;
    c.model = ModelConfig::toy();
    c.lora = LoraSpec::toy();
    c.pretrain.steps = 150;
    c.pretrain.batch_size = 8;
    c.pretrain.learning_rate = 3e-3;
    c.stage1.learning_rate = 5e-3;
    c.stage1.batch_size = 8;
    c.stage1.epochs = 1;
    c.stage1.max_steps = 120;
    c.stage2.learning_rate = 3e-3;
    c.stage2.batch_size = 8;
    c.stage2.epochs = 1;
    c.stage2.max_steps = 20;
    return c;
}

Json to_json(const PipelineConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["paths"] = {{"work_dir", c.paths.work_dir.string()},
                  {"images", c.paths.images.string()},
                  {"annotations", c.paths.annotations.string()},
                  {"foundation_checkpoint", c.paths.foundation_checkpoint.string()}};
    j["model"] = to_json(c.model);
    j["lora"] = to_json(c.lora);
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch_size", c.pretrain.batch_size},
                     {"learning_rate", c.pretrain.learning_rate},
                     {"clip_norm", c.pretrain.clip_norm}};
    j["stage1"] = to_json(c.stage1);
    j["stage2"] = to_json(c.stage2);
    j["synthetic"] = {{"n_train", c.synthetic.n_train},
                      {"n_test", c.synthetic.n_test},
                      {"train_kinds", c.synthetic.train_kinds},
                      {"test_kinds", c.synthetic.test_kinds}};
    j["forgreason"] = {{"annotated", c.forgreason.annotated},
                       {"real", c.forgreason.real},
                       {"fake", c.forgreason.fake}};
    j["clients"] = {{"captioner", c.clients.captioner},
                    {"summarizer", c.clients.summarizer},
                    {"judge", c.clients.judge},
                    {"live",
                     {{"endpoint", c.clients.live.endpoint},
                      {"model", c.clients.live.model},
                      {"max_pairs", c.clients.live.max_pairs},
                      {"timeout_seconds", c.clients.live.timeout_seconds}}}};
    j["eval"] = {{"prompt", c.eval.prompt}, {"max_tokens", c.eval.max_tokens}};
    j["service"] = {{"host", c.service.host},
                    {"port", c.service.port},
                    {"ui_dir", c.service.ui_dir.string()}};
    return j;
}

PipelineConfig pipeline_config_from_json(const Json& j, const std::filesystem::path& base_dir) {
    using namespace cfg;
    reject_unknown(j,
                   {"seed", "paths", "model", "lora", "pretrain", "stage1", "stage2", "synthetic",
                    "forgreason", "clients", "eval", "service"},
                   "");
    PipelineConfig c = PipelineConfig::toy();
    c.base_dir = base_dir;
    read_unsigned(j, "seed", c.seed, "");
    if (j.contains("paths")) {
        const Json& p = j.at("paths");
        reject_unknown(p, {"work_dir", "images", "annotations", "foundation_checkpoint"}, "paths");
        read_path(p, "work_dir", c.paths.work_dir, "paths");
        read_path(p, "images", c.paths.images, "paths");
        read_path(p, "annotations", c.paths.annotations, "paths");
        read_path(p, "foundation_checkpoint", c.paths.foundation_checkpoint, "paths");
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), "model");
    if (j.contains("lora")) c.lora = lora_spec_from_json(j.at("lora"), "lora");
    if (j.contains("pretrain")) {
        const Json& p = j.at("pretrain");
        reject_unknown(p, {"steps", "batch_size", "learning_rate", "clip_norm"}, "pretrain");
        read_unsigned(p, "steps", c.pretrain.steps, "pretrain");
        read_unsigned(p, "batch_size", c.pretrain.batch_size, "pretrain");
        read_double(p, "learning_rate", c.pretrain.learning_rate, "pretrain");
        read_double(p, "clip_norm", c.pretrain.clip_norm, "pretrain");
    }
    if (j.contains("stage1")) c.stage1 = stage_from_json(j.at("stage1"), "stage1", c.stage1);
    if (j.contains("stage2")) c.stage2 = stage_from_json(j.at("stage2"), "stage2", c.stage2);
    if (j.contains("synthetic")) {
        const Json& s = j.at("synthetic");
        reject_unknown(s, {"n_train", "n_test", "train_kinds", "test_kinds"}, "synthetic");
        read_unsigned(s, "n_train", c.synthetic.n_train, "synthetic");
        read_unsigned(s, "n_test", c.synthetic.n_test, "synthetic");
        read_strings(s, "train_kinds", c.synthetic.train_kinds, "synthetic");
        read_strings(s, "test_kinds", c.synthetic.test_kinds, "synthetic");
        for (const auto* kinds : {&c.synthetic.train_kinds, &c.synthetic.test_kinds}) {
            for (const auto& k : *kinds) {
                if (k != "A" && k != "B") {
                    throw ValidationError("config key 'synthetic': artifact kind must be 'A' or 'B', got '" + k + "'");
                }
            }
        }
    }
    if (j.contains("forgreason")) {
        const Json& f = j.at("forgreason");
        reject_unknown(f, {"annotated", "real", "fake"}, "forgreason");
        read_unsigned(f, "annotated", c.forgreason.annotated, "forgreason");
        read_unsigned(f, "real", c.forgreason.real, "forgreason");
        read_unsigned(f, "fake", c.forgreason.fake, "forgreason");
    }
    if (j.contains("clients")) {
        const Json& cl = j.at("clients");
        reject_unknown(cl, {"captioner", "summarizer", "judge", "live"}, "clients");
        read_string(cl, "captioner", c.clients.captioner, "clients");
        read_string(cl, "summarizer", c.clients.summarizer, "clients");
        read_string(cl, "judge", c.clients.judge, "clients");
        check_backend(c.clients.captioner, "clients.captioner");
        check_backend(c.clients.summarizer, "clients.summarizer");
        check_backend(c.clients.judge, "clients.judge");
        if (cl.contains("live")) {
            const Json& l = cl.at("live");
            reject_unknown(l, {"endpoint", "model", "max_pairs", "timeout_seconds"}, "clients.live");
            read_string(l, "endpoint", c.clients.live.endpoint, "clients.live");
            read_string(l, "model", c.clients.live.model, "clients.live");
            read_unsigned(l, "max_pairs", c.clients.live.max_pairs, "clients.live");
            read_int(l, "timeout_seconds", c.clients.live.timeout_seconds, "clients.live");
        }
    }
    if (j.contains("eval")) {
        const Json& e = j.at("eval");
        reject_unknown(e, {"prompt", "max_tokens"}, "eval");
        read_string(e, "prompt", c.eval.prompt, "eval");
        read_unsigned(e, "max_tokens", c.eval.max_tokens, "eval");
        const bool known = std::any_of(resources::kDetectionPrompts.begin(), resources::kDetectionPrompts.end(),
                                       [&](const auto& p) { return p.version == c.eval.prompt; });
        if (!known) throw ValidationError("config key 'eval.prompt': unknown prompt version '" + c.eval.prompt + "'");
    }
    if (j.contains("service")) {
        const Json& s = j.at("service");
        reject_unknown(s, {"host", "port", "ui_dir"}, "service");
        read_string(s, "host", c.service.host, "service");
        read_int(s, "port", c.service.port, "service");
        read_path(s, "ui_dir", c.service.ui_dir, "service");
    }
    // Referenced input files must exist.
    auto must_exist = [&](const std::filesystem::path& p, const char* key) {
        if (!p.empty() && !std::filesystem::exists(c.resolve(p))) {
            throw ValidationError("config key '" + std::string(key) + "': path does not exist: " +
                                  c.resolve(p).string());
        }
    };
    must_exist(c.paths.images, "paths.images");
    must_exist(c.paths.annotations, "paths.annotations");
    must_exist(c.service.ui_dir, "service.ui_dir");
    return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open config file " + file.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config file " + file.string() + " is not valid JSON: " + e.what());
    }
    auto base = std::filesystem::absolute(file).parent_path();
    return pipeline_config_from_json(j, base);
}

}  // namespace forenx
