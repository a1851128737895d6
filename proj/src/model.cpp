#include "forenx/model.hpp"

#include <algorithm>
#include <cmath>

#include "forenx/resources.hpp"

namespace forenx {

namespace {

void check_finite(const ag::Var& v, const std::string& layer) {
    if (!v.value().all_finite()) throw NonFiniteError(layer);
}

}  // namespace

const char* to_string(ForensicMode m) { return m == ForensicMode::Pooler ? "pooler" : "all"; }
const char* to_string(EmbeddingMode m) { return m == EmbeddingMode::Vector ? "vector" : "matrix"; }
const char* to_string(DetectorHead h) { return h == DetectorHead::Sum ? "sum" : "mlp"; }
const char* to_string(ForensicPlacement p) {
    return p == ForensicPlacement::AfterContent ? "after_content" : "before_content";
}

ForensicMode parse_forensic_mode(const std::string& s) {
    if (s == "pooler") return ForensicMode::Pooler;
    if (s == "all") return ForensicMode::All;
    throw ValidationError("forensic_mode must be 'pooler' or 'all', got '" + s + "'");
}
EmbeddingMode parse_embedding_mode(const std::string& s) {
    if (s == "vector") return EmbeddingMode::Vector;
    if (s == "matrix") return EmbeddingMode::Matrix;
    throw ValidationError("embedding_mode must be 'vector' or 'matrix', got '" + s + "'");
}
DetectorHead parse_detector_head(const std::string& s) {
    if (s == "sum") return DetectorHead::Sum;
    if (s == "mlp") return DetectorHead::Mlp;
    throw ValidationError("detector_head must be 'sum' or 'mlp', got '" + s + "'");
}
ForensicPlacement parse_forensic_placement(const std::string& s) {
    if (s == "after_content") return ForensicPlacement::AfterContent;
    if (s == "before_content") return ForensicPlacement::BeforeContent;
    throw ValidationError("forensic_placement must be 'after_content' or 'before_content', got '" +
                          s + "'");
}

const char* to_string(Segment s) {
    switch (s) {
        case Segment::System: return "system";
        case Segment::ContentVisual: return "content_visual";
        case Segment::Forensic: return "forensic";
        case Segment::User: return "user";
        case Segment::Answer: return "answer";
    }
    return "unknown";
}

std::size_t ModelConfig::forensic_token_count() const {
    if (!enable_llm || !enable_forensic_projector) return 0;
    return forensic_mode == ForensicMode::Pooler ? 1 : forensic_tokens_all;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (profile != "toy" && profile != "full-shape") fail("profile must be 'toy' or 'full-shape'");
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
        fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
             std::to_string(patch_size));
    if (channels == 0) fail("channels must be positive");
    if (vision_heads == 0 || vision_width % vision_heads != 0)
        fail("vision_width must be divisible by vision_heads");
    if (lm_heads == 0 || lm_width % lm_heads != 0) fail("lm_width must be divisible by lm_heads");
    if (vocab_size < 200) fail("vocab_size must be at least 200");
    if (max_seq_len < 8) fail("max_seq_len too small");
    if (forensic_tokens_all == 0) fail("forensic_tokens_all must be positive");
    if (profile == "full-shape" && (token_count() != 577 || vision_width != 1024))
        fail("full-shape profile requires 577 vision tokens and vision_width 1024");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::full_shape() {
    ModelConfig c;
    c.profile = "full-shape";
    c.image_size = 336;
    c.patch_size = 14;
    c.vision_width = 1024;
    c.vision_heads = 16;
    c.vision_layers = 0;
    c.max_seq_len = 800;
    return c;
}

Image Image::zeros(std::size_t channels, std::size_t height, std::size_t width) {
    Image img;
    img.channels = channels;
    img.height = height;
    img.width = width;
    img.pixels.assign(channels * height * width, 0.0);
    return img;
}

ForensicEmbedding ForensicEmbedding::identity(EmbeddingMode mode, std::size_t width) {
    ForensicEmbedding e;
    e.mode = mode;
    e.d = ag::parameter(mode == EmbeddingMode::Vector ? Matrix(1, width, 1.0)
                                                      : Matrix::identity(width));
    return e;
}

std::size_t TokenSequence::count(Segment s) const {
    return static_cast<std::size_t>(std::count(segments.begin(), segments.end(), s));
}

std::size_t TokenSequence::supervised() const {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true));
}

// ---- VisionBackbone ---------------------------------------------------------

VisionBackbone::VisionBackbone(const ModelConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      patch_embed_(cfg.channels * cfg.patch_size * cfg.patch_size, cfg.vision_width, true,
                   cfg.init_std, rng),
      class_token_(ag::parameter(random_normal(1, cfg.vision_width, cfg.init_std, rng))),
      pos_embed_(ag::parameter(random_normal(cfg.token_count(), cfg.vision_width, cfg.init_std, rng))),
      ln_pre_(cfg.vision_width),
      ln_post_(cfg.vision_width) {
    blocks_.reserve(cfg.vision_layers);
    for (std::size_t i = 0; i < cfg.vision_layers; ++i) {
        blocks_.emplace_back(cfg.vision_width, cfg.vision_heads, 4 * cfg.vision_width, false,
                             cfg.init_std, rng);
    }
}

VisualFeatures VisionBackbone::encode(const Image& image, const RunContext& ctx) const {
    const std::size_t p = cfg_.patch_size;
    if (image.channels != cfg_.channels || image.height != cfg_.image_size ||
        image.width != cfg_.image_size || image.pixels.size() != image.channels * image.height * image.width) {
        throw ValidationError("image shape " + std::to_string(image.channels) + "x" +
                              std::to_string(image.height) + "x" + std::to_string(image.width) +
                              " does not match backbone input " + std::to_string(cfg_.channels) +
                              "x" + std::to_string(cfg_.image_size) + "x" +
                              std::to_string(cfg_.image_size) + " (patch " + std::to_string(p) +
                              ", grid " + std::to_string(cfg_.patch_grid()) + "x" +
                              std::to_string(cfg_.patch_grid()) + ")");
    }
    for (double v : image.pixels) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pixel values must lie in [0, 1]");
    }
    const std::size_t grid = cfg_.patch_grid();
    Matrix patches(grid * grid, cfg_.channels * p * p);
    for (std::size_t gy = 0; gy < grid; ++gy) {
        for (std::size_t gx = 0; gx < grid; ++gx) {
            auto row = patches.row_span(gy * grid + gx);
            std::size_t k = 0;
            for (std::size_t c = 0; c < cfg_.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x) row[k++] = image.at(c, gy * p + y, gx * p + x);
        }
    }
    ag::Var emb = patch_embed_.forward(ag::constant(std::move(patches)), ctx);
    std::vector<ag::Var> parts{class_token_, emb};
    ag::Var x = ag::add(ag::concat_rows(parts), pos_embed_);
    x = ln_pre_.forward(x);
    check_finite(x, "vision.embed");
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = blocks_[i].forward(x, ctx);
        check_finite(x, "vision.blocks." + std::to_string(i));
    }
    VisualFeatures vf;
    vf.patch_tokens = x;
    vf.pooled = ln_post_.forward(ag::slice_rows(x, 0, 1));
    check_finite(vf.pooled, "vision.ln_post");
    return vf;
}

void VisionBackbone::collect(ParameterList& out) const {
    patch_embed_.collect("vision.patch_embed", ParamGroup::VisionBase, ParamGroup::VisionLora, out);
    out.push_back({"vision.class_token", ParamGroup::VisionBase, class_token_});
    out.push_back({"vision.pos_embed", ParamGroup::VisionBase, pos_embed_});
    ln_pre_.collect("vision.ln_pre", ParamGroup::VisionBase, out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect("vision.blocks." + std::to_string(i), ParamGroup::VisionBase,
                           ParamGroup::VisionLora, out);
    }
    ln_post_.collect("vision.ln_post", ParamGroup::VisionBase, out);
}

// ---- MlpHead ----------------------------------------------------------------

MlpHead::MlpHead(std::size_t in, std::size_t hidden, std::size_t out, double init_std,
                 std::mt19937_64& rng)
    : fc1(in, hidden, true, init_std, rng), fc2(hidden, out, true, init_std, rng) {}

ag::Var MlpHead::forward(const ag::Var& x, const RunContext& ctx) const {
    return fc2.forward(ag::gelu(fc1.forward(x, ctx)), ctx);
}

void MlpHead::collect(const std::string& prefix, ParamGroup group, ParameterList& out) const {
    fc1.collect(prefix + ".fc1", group, group, out);
    fc2.collect(prefix + ".fc2", group, group, out);
}

// ---- LanguageModel ----------------------------------------------------------

LanguageModel::LanguageModel(const ModelConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      tok_embed_(ag::parameter(random_normal(cfg.vocab_size, cfg.lm_width, cfg.init_std, rng))),
      pos_embed_(ag::parameter(random_normal(cfg.max_seq_len, cfg.lm_width, cfg.init_std, rng))),
      ln_f_(cfg.lm_width) {
    blocks_.reserve(cfg.lm_layers);
    for (std::size_t i = 0; i < cfg.lm_layers; ++i) {
        blocks_.emplace_back(cfg.lm_width, cfg.lm_heads, 4 * cfg.lm_width, true, cfg.init_std, rng);
    }
    head_ = LoraLinear(cfg.lm_width, cfg.vocab_size, true, cfg.init_std, rng);
    if (cfg.zero_init_lm_head) head_.weight().node()->value.fill(0.0);
}

ag::Var LanguageModel::embed(std::span<const int> ids) const { return ag::gather_rows(tok_embed_, ids); }

ag::Var LanguageModel::forward(const ag::Var& embeddings, const RunContext& ctx) const {
    const std::size_t L = embeddings.rows();
    if (L == 0 || L > cfg_.max_seq_len) {
        throw ValidationError("sequence length " + std::to_string(L) + " outside [1, " +
                              std::to_string(cfg_.max_seq_len) + "]");
    }
    if (embeddings.cols() != cfg_.lm_width) {
        throw ValidationError("embedding width " + std::to_string(embeddings.cols()) +
                              " != lm_width " + std::to_string(cfg_.lm_width));
    }
    ag::Var x = ag::add(embeddings, ag::slice_rows(pos_embed_, 0, L));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = blocks_[i].forward(x, ctx);
        check_finite(x, "lm.blocks." + std::to_string(i));
    }
    ag::Var logits = head_.forward(ln_f_.forward(x), ctx);
    check_finite(logits, "lm.head");
    return logits;
}

void LanguageModel::collect(ParameterList& out) const {
    out.push_back({"lm.tok_embed", ParamGroup::LanguageBase, tok_embed_});
    out.push_back({"lm.pos_embed", ParamGroup::LanguageBase, pos_embed_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect("lm.blocks." + std::to_string(i), ParamGroup::LanguageBase,
                           ParamGroup::LanguageLora, out);
    }
    ln_f_.collect("lm.ln_f", ParamGroup::LanguageBase, out);
    head_.collect("lm.head", ParamGroup::LanguageBase, ParamGroup::LanguageLora, out);
}

// ---- Free operations --------------------------------------------------------

ag::Var forensic_encode(const ag::Var& features, const ForensicEmbedding& d) {
    const std::size_t width = features.cols();
    if (d.mode == EmbeddingMode::Vector) {
        if (d.d.rows() != 1 || d.d.cols() != width) {
            throw ValidationError("forensic embedding " + d.d.value().shape_str() +
                                  " incompatible with features " + features.value().shape_str());
        }
        return ag::mul_row(features, d.d);
    }
    if (d.d.rows() != width || d.d.cols() != width) {
        throw ValidationError("forensic embedding " + d.d.value().shape_str() +
                              " incompatible with features " + features.value().shape_str());
    }
    return ag::matmul(features, d.d);
}

ag::Var detect(const ag::Var& forensic_features, DetectorHead head, const MlpHead* mlp,
               const RunContext& ctx) {
    if (!forensic_features.value().all_finite()) {
        throw ValidationError("detect: non-finite forensic features");
    }
    if (head == DetectorHead::Sum) return ag::sum(forensic_features);
    if (!mlp) throw ValidationError("detect: mlp head requested without weights");
    if (forensic_features.rows() != 1) {
        throw ValidationError("detect: mlp head expects one feature row, got " +
                              forensic_features.value().shape_str());
    }
    ag::Var out = mlp->forward(forensic_features, ctx);
    if (out.value().size() != 1) throw ValidationError("detect: mlp head must emit a scalar");
    return out;
}

ag::Var project_content(const ag::Var& patch_tokens, const LoraLinear& projector,
                        const RunContext& ctx) {
    if (patch_tokens.rows() == 0) throw ValidationError("project_content: no tokens");
    if (patch_tokens.cols() != projector.in_features()) {
        throw ValidationError("project_content: tokens " + patch_tokens.value().shape_str() +
                              " vs projector input width " +
                              std::to_string(projector.in_features()));
    }
    return projector.forward(patch_tokens, ctx);
}

ForensicPromptTokens project_forensic(const ag::Var& forensic_features, ForensicMode mode,
                                      const ForensicProjector* projector, const RunContext& ctx) {
    ForensicPromptTokens out;
    if (!projector) return out;
    if (mode == ForensicMode::Pooler) {
        if (forensic_features.rows() != 1) {
            throw ValidationError("project_forensic: pooler mode expects [1 x D_v], got " +
                                  forensic_features.value().shape_str());
        }
        out.tokens = projector->mapper.forward(forensic_features, ctx);
        out.k = 1;
        return out;
    }
    const Matrix& R = projector->token_reducer.value();
    if (forensic_features.rows() != R.cols) {
        throw ValidationError("project_forensic: all mode expects " + std::to_string(R.cols) +
                              " tokens, got " + forensic_features.value().shape_str());
    }
    ag::Var reduced = ag::matmul(projector->token_reducer, forensic_features);
    out.tokens = projector->mapper.forward(reduced, ctx);
    out.k = R.rows;
    return out;
}

TokenSequence assemble_sequence(std::string_view system_text, std::string_view user_text,
                                const ag::Var& content_tokens,
                                const ForensicPromptTokens& forensic,
                                const std::optional<std::string>& answer_text,
                                const Tokenizer& tokenizer, const LanguageModel& lm,
                                ForensicPlacement placement) {
    if (user_text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
        throw ValidationError("assemble_sequence: user text is empty");
    }
    std::vector<int> sys_ids{Tokenizer::kBos};
    for (int id : tokenizer.encode(system_text)) sys_ids.push_back(id);
    const std::vector<int> user_ids = tokenizer.encode(user_text);

    TokenSequence seq;
    std::vector<ag::Var> parts;
    auto add_text = [&](const std::vector<int>& ids, Segment seg) {
        if (ids.empty()) return;
        parts.push_back(lm.embed(ids));
        for (int id : ids) {
            seq.segments.push_back(seg);
            seq.token_ids.push_back(id);
            seq.loss_mask.push_back(seg == Segment::Answer);
        }
    };
    auto add_visual = [&](const ag::Var& v, std::size_t rows, Segment seg) {
        if (rows == 0) return;
        parts.push_back(v);
        for (std::size_t i = 0; i < rows; ++i) {
            seq.segments.push_back(seg);
            seq.token_ids.push_back(-1);
            seq.loss_mask.push_back(false);
        }
    };

    add_text(sys_ids, Segment::System);
    const std::size_t content_rows = content_tokens.defined() ? content_tokens.rows() : 0;
    if (placement == ForensicPlacement::AfterContent) {
        add_visual(content_tokens, content_rows, Segment::ContentVisual);
        add_visual(forensic.tokens, forensic.k, Segment::Forensic);
    } else {
        add_visual(forensic.tokens, forensic.k, Segment::Forensic);
        add_visual(content_tokens, content_rows, Segment::ContentVisual);
    }
    add_text(user_ids, Segment::User);
    if (answer_text) {
        std::vector<int> ans = tokenizer.encode(*answer_text);
        ans.push_back(Tokenizer::kEos);
        add_text(ans, Segment::Answer);
    }
    seq.embeddings = ag::concat_rows(parts);
    return seq;
}

std::string user_turn_text(std::string_view question) {
    std::string s(resources::kUserTag);
    s += ' ';
    s += question;
    s += ' ';
    s += resources::kAssistantTag;
    return s;
}

// ---- ForenxModel ------------------------------------------------------------

ForenxModel::ForenxModel(ModelConfig cfg) : ForenxModel(cfg, Tokenizer::build_default(cfg.vocab_size)) {}

ForenxModel::ForenxModel(ModelConfig cfg, Tokenizer tokenizer)
    : cfg_(std::move(cfg)), tokenizer_(std::move(tokenizer)) {
    cfg_.validate();
    if (tokenizer_.size() != cfg_.vocab_size) {
        throw ValidationError("tokenizer has " + std::to_string(tokenizer_.size()) +
                              " pieces but vocab_size is " + std::to_string(cfg_.vocab_size));
    }
    std::mt19937_64 rng(cfg_.init_seed);
    vision_ = std::make_unique<VisionBackbone>(cfg_, rng);
    embedding_ = ForensicEmbedding::identity(cfg_.embedding_mode, cfg_.vision_width);
    const double reducer_std = 1.0 / std::sqrt(static_cast<double>(cfg_.token_count()));
    forensic_projector_.token_reducer = ag::parameter(
        random_normal(cfg_.forensic_tokens_all, cfg_.token_count(), reducer_std, rng));
    forensic_projector_.mapper =
        MlpHead(cfg_.vision_width, cfg_.lm_width, cfg_.lm_width, cfg_.init_std, rng);
    content_projector_ = LoraLinear(cfg_.vision_width, cfg_.lm_width, true, cfg_.init_std, rng);
    mlp_head_ = MlpHead(cfg_.vision_width, cfg_.vision_width, 1, cfg_.init_std, rng);
    lm_ = std::make_unique<LanguageModel>(cfg_, rng);
}

VisualFeatures ForenxModel::encode_image(const Image& image, const RunContext& ctx) const {
    return vision_->encode(image, ctx);
}

ag::Var ForenxModel::forensic_input(const VisualFeatures& vf) const {
    return cfg_.forensic_mode == ForensicMode::Pooler ? vf.pooled : vf.patch_tokens;
}

ag::Var ForenxModel::detection_input(const ag::Var& forensic_features) const {
    return forensic_features.rows() == 1 ? forensic_features : ag::mean_rows(forensic_features);
}

ag::Var ForenxModel::detection_logit(const Image& image, const RunContext& ctx) const {
    VisualFeatures vf = encode_image(image, ctx);
    ag::Var ff = forensic_encode(forensic_input(vf), embedding_);
    return detect(detection_input(ff), cfg_.detector_head, &mlp_head_, ctx);
}

ForwardOutput ForenxModel::forward(const Example& ex, const ForwardOptions& opts) const {
    if (!ex.image) throw ValidationError("forward: example has no image");
    const RunContext& ctx = opts.ctx;
    ForwardOutput out;
    VisualFeatures vf = encode_image(*ex.image, ctx);
    const bool use_lm = cfg_.enable_llm && opts.compute_language;
    const bool use_forensic_tokens = use_lm && cfg_.enable_forensic_projector;
    if (opts.compute_detection || use_forensic_tokens) {
        out.forensic_features = forensic_encode(forensic_input(vf), embedding_);
        check_finite(out.forensic_features, "forensic.embedding");
    }
    if (opts.compute_detection) {
        out.detection_logit =
            detect(detection_input(out.forensic_features), cfg_.detector_head, &mlp_head_, ctx);
        check_finite(out.detection_logit, "detector");
    }
    if (!use_lm) return out;

    ag::Var content = project_content(vf.patch_tokens, content_projector_, ctx);
    ForensicPromptTokens ftoks;
    if (use_forensic_tokens) {
        ag::Var src = cfg_.instruction_grad_to_embedding ? out.forensic_features
                                                         : ag::detach(out.forensic_features);
        ftoks = project_forensic(src, cfg_.forensic_mode, &forensic_projector_, ctx);
        check_finite(ftoks.tokens, "forensic.projector");
    }
    out.sequence = assemble_sequence(ex.system, user_turn_text(ex.question), content, ftoks,
                                     ex.answer, tokenizer_, *lm_, cfg_.forensic_placement);
    out.lm_logits = lm_->forward(out.sequence.embeddings, ctx);
    ++lm_forward_count_;
    std::size_t seen = max_forensic_seen_.load();
    const std::size_t k = out.sequence.count(Segment::Forensic);
    while (k > seen && !max_forensic_seen_.compare_exchange_weak(seen, k)) {
    }
    return out;
}

std::vector<ForwardOutput> ForenxModel::forward(std::span<const Example> batch,
                                                const ForwardOptions& opts) const {
    std::vector<ForwardOutput> outs;
    outs.reserve(batch.size());
    for (const Example& ex : batch) outs.push_back(forward(ex, opts));
    return outs;
}

std::string ForenxModel::generate(const Image& image, std::string_view system,
                                  std::string_view question, std::size_t max_tokens) const {
    if (!cfg_.enable_llm) throw ValidationError("generate: language model disabled in this config");
    ag::NoGradGuard no_grad;
    Example ex;
    ex.image = &image;
    ex.system = std::string(system);
    ex.question = std::string(question);
    ForwardOutput out = forward(ex, ForwardOptions{{}, false, true});
    ag::Var emb = out.sequence.embeddings;
    ag::Var logits = out.lm_logits;
    std::vector<int> produced;
    for (std::size_t step = 0; step < max_tokens; ++step) {
        if (step > 0) {
            logits = lm_->forward(emb, {});
            ++lm_forward_count_;
        }
        const auto last = logits.value().row_span(logits.rows() - 1);
        const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        if (next == Tokenizer::kEos) break;
        produced.push_back(next);
        if (emb.rows() + 1 > cfg_.max_seq_len) break;
        const int ids[1] = {next};
        std::vector<ag::Var> parts{emb, lm_->embed(ids)};
        emb = ag::concat_rows(parts);
    }
    return tokenizer_.decode(produced);
}

ParameterList ForenxModel::parameters() const {
    ParameterList out;
    vision_->collect(out);
    out.push_back({"forensic.embedding", ParamGroup::ForensicEmbedding, embedding_.d});
    out.push_back({"forensic.token_reducer", ParamGroup::TokenReducer,
                   forensic_projector_.token_reducer});
    forensic_projector_.mapper.collect("forensic.mapper", ParamGroup::ForensicProjector, out);
    content_projector_.collect("content_projector", ParamGroup::ContentProjector,
                               ParamGroup::ContentProjector, out);
    mlp_head_.collect("detector", ParamGroup::DetectionHead, out);
    lm_->collect(out);
    return out;
}

std::vector<std::pair<std::string, LoraLinear*>> ForenxModel::block_projections() {
    static const char* kNames[] = {"q_proj", "k_proj", "v_proj", "o_proj", "fc1", "fc2"};
    std::vector<std::pair<std::string, LoraLinear*>> out;
    auto add_tower = [&](const std::string& prefix, std::vector<TransformerBlock>& blocks) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            for (const char* n : kNames) {
                out.emplace_back(prefix + std::to_string(i) + "." + n, &blocks[i].projection(n));
            }
        }
    };
    add_tower("vision.blocks.", vision_->blocks());
    add_tower("lm.blocks.", lm_->blocks());
    return out;
}

void ForenxModel::reset_counters() {
    lm_forward_count_ = 0;
    max_forensic_seen_ = 0;
}

}  // namespace forenx
