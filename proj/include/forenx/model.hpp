#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forenx/autograd.hpp"
#include "forenx/nn.hpp"
#include "forenx/tokenizer.hpp"

namespace forenx {

/// Raised when a forward pass produces NaN/Inf; names the offending layer.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(std::string layer)
        : std::runtime_error("non-finite activation in " + layer), layer_(std::move(layer)) {}
    const std::string& layer() const { return layer_; }

private:
    std::string layer_;
};

enum class ForensicMode { Pooler, All };
enum class EmbeddingMode { Vector, Matrix };
enum class DetectorHead { Sum, Mlp };
enum class ForensicPlacement { AfterContent, BeforeContent };

const char* to_string(ForensicMode m);
const char* to_string(EmbeddingMode m);
const char* to_string(DetectorHead h);
const char* to_string(ForensicPlacement p);
ForensicMode parse_forensic_mode(const std::string& s);
EmbeddingMode parse_embedding_mode(const std::string& s);
DetectorHead parse_detector_head(const std::string& s);
ForensicPlacement parse_forensic_placement(const std::string& s);

/// Every architectural switch of the model, including the ablation toggles.
struct ModelConfig {
    std::string profile = "toy";  // "toy" or "full-shape"
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t vision_width = 32;
    std::size_t vision_layers = 2;
    std::size_t vision_heads = 2;
    std::size_t lm_width = 64;
    std::size_t lm_layers = 2;
    std::size_t lm_heads = 2;
    std::size_t vocab_size = 512;
    std::size_t max_seq_len = 192;
    std::size_t forensic_tokens_all = 16;

    ForensicMode forensic_mode = ForensicMode::Pooler;
    EmbeddingMode embedding_mode = EmbeddingMode::Vector;
    DetectorHead detector_head = DetectorHead::Sum;
    ForensicPlacement forensic_placement = ForensicPlacement::AfterContent;

    bool enable_forensic_projector = true;
    bool enable_detection_loss = true;
    bool enable_llm = true;
    bool enable_vision_lora = true;
    /// When false the forensic projector sees a detached copy of F_v^f, so only
    /// the detection loss can move d.
    bool instruction_grad_to_embedding = true;

    double init_std = 0.02;
    std::uint64_t init_seed = 0;
    bool zero_init_lm_head = false;

    std::size_t patch_grid() const { return image_size / patch_size; }
    /// Patch tokens plus the class token.
    std::size_t token_count() const { return patch_grid() * patch_grid() + 1; }
    std::size_t forensic_token_count() const;

    void validate() const;

    static ModelConfig toy();
    /// Fixes 336px input with 14px patches (577 tokens) and 1024-wide vision features.
    static ModelConfig full_shape();
};

/// Image in CHW layout with values in [0, 1].
struct Image {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels[(c * height + y) * width + x];
    }
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return pixels[(c * height + y) * width + x];
    }
    static Image zeros(std::size_t channels, std::size_t height, std::size_t width);
};

struct VisualFeatures {
    ag::Var patch_tokens;  // [T x D_v], class token first
    ag::Var pooled;        // [1 x D_v]
};

struct ForensicEmbedding {
    EmbeddingMode mode = EmbeddingMode::Vector;
    ag::Var d;  // [1 x D_v] or [D_v x D_v]
    bool trainable = true;

    /// All-ones vector or identity matrix.
    static ForensicEmbedding identity(EmbeddingMode mode, std::size_t width);
};

struct ForensicPromptTokens {
    ag::Var tokens;  // [k x D_lm]; undefined when k == 0
    std::size_t k = 0;
};

enum class Segment : std::uint8_t { System, ContentVisual, Forensic, User, Answer };
const char* to_string(Segment s);

struct TokenSequence {
    ag::Var embeddings;             // [L x D_lm]
    std::vector<Segment> segments;  // per position
    std::vector<int> token_ids;     // text token id per position, -1 for visual positions
    std::vector<bool> loss_mask;    // true exactly on answer positions

    std::size_t length() const { return segments.size(); }
    std::size_t count(Segment s) const;
    std::size_t supervised() const;
};

struct ForwardOutput {
    ag::Var lm_logits;          // [L x vocab]; undefined when the language model is disabled
    ag::Var detection_logit;    // [1 x 1]; undefined when detection was not evaluated
    ag::Var forensic_features;  // F_v^f
    TokenSequence sequence;     // empty when the language model is disabled
};

/// ViT-style image encoder: patch embedding, class token, pre-norm blocks, pooled class token.
class VisionBackbone {
public:
    VisionBackbone(const ModelConfig& cfg, std::mt19937_64& rng);

    VisualFeatures encode(const Image& image, const RunContext& ctx) const;

    std::vector<TransformerBlock>& blocks() { return blocks_; }
    void collect(ParameterList& out) const;

private:
    ModelConfig cfg_;
    LoraLinear patch_embed_;
    ag::Var class_token_;
    ag::Var pos_embed_;
    LayerNormParams ln_pre_;
    std::vector<TransformerBlock> blocks_;
    LayerNormParams ln_post_;
};

/// Two affine layers with GELU between them.
struct MlpHead {
    LoraLinear fc1;
    LoraLinear fc2;

    MlpHead() = default;
    MlpHead(std::size_t in, std::size_t hidden, std::size_t out, double init_std,
            std::mt19937_64& rng);
    ag::Var forward(const ag::Var& x, const RunContext& ctx) const;
    void collect(const std::string& prefix, ParamGroup group, ParameterList& out) const;
};

class LanguageModel {
public:
    LanguageModel(const ModelConfig& cfg, std::mt19937_64& rng);

    ag::Var embed(std::span<const int> ids) const;
    /// Causal forward over input embeddings; returns logits [L x vocab].
    ag::Var forward(const ag::Var& embeddings, const RunContext& ctx) const;

    std::vector<TransformerBlock>& blocks() { return blocks_; }
    LoraLinear& head() { return head_; }
    void collect(ParameterList& out) const;

private:
    ModelConfig cfg_;
    ag::Var tok_embed_;
    ag::Var pos_embed_;
    std::vector<TransformerBlock> blocks_;
    LayerNormParams ln_f_;
    LoraLinear head_;
};

// ---- Forward-path operations ----------------------------------------------

/// F_v (x) d in vector mode, F_v . d in matrix mode. F_v may hold one or many rows.
ag::Var forensic_encode(const ag::Var& features, const ForensicEmbedding& d);

/// Sum of all entries, or the MLP head applied to the input row. Rejects non-finite input.
ag::Var detect(const ag::Var& forensic_features, DetectorHead head, const MlpHead* mlp,
               const RunContext& ctx = {});

/// Affine projection of each patch token into the language-model width.
ag::Var project_content(const ag::Var& patch_tokens, const LoraLinear& projector,
                        const RunContext& ctx = {});

struct ForensicProjector {
    ag::Var token_reducer;  // [k_all x T], only used in all-token mode
    MlpHead mapper;         // D_v -> D_lm -> D_lm
};

/// Pooler mode: one token from a [1 x D_v] input. All mode: [T x D_v] reduced to k_all rows
/// by a learned token-axis map, then mapped row-wise. Disabled projector yields k = 0.
ForensicPromptTokens project_forensic(const ag::Var& forensic_features, ForensicMode mode,
                                      const ForensicProjector* projector,
                                      const RunContext& ctx = {});

/// Lays out [system][content_visual][forensic][user][answer] (forensic before content when
/// placement says so). The system segment starts with <bos>; the answer ends with <eos>.
TokenSequence assemble_sequence(std::string_view system_text, std::string_view user_text,
                                const ag::Var& content_tokens,
                                const ForensicPromptTokens& forensic,
                                const std::optional<std::string>& answer_text,
                                const Tokenizer& tokenizer, const LanguageModel& lm,
                                ForensicPlacement placement = ForensicPlacement::AfterContent);

/// One image/question pair. `answer` is present in training mode only.
struct Example {
    const Image* image = nullptr;
    std::string system;
    std::string question;
    std::optional<std::string> answer;
    int label = -1;  // 1 = AI-generated, 0 = real, -1 unknown
};

struct ForwardOptions {
    RunContext ctx;
    bool compute_detection = true;
    bool compute_language = true;
};

/// Wraps a question in the role tags used for the user segment.
std::string user_turn_text(std::string_view question);

class ForenxModel {
public:
    ForenxModel(ModelConfig cfg, Tokenizer tokenizer);
    explicit ForenxModel(ModelConfig cfg);

    ForenxModel(const ForenxModel&) = delete;
    ForenxModel& operator=(const ForenxModel&) = delete;

    VisualFeatures encode_image(const Image& image, const RunContext& ctx = {}) const;
    ForwardOutput forward(const Example& ex, const ForwardOptions& opts = {}) const;
    std::vector<ForwardOutput> forward(std::span<const Example> batch,
                                       const ForwardOptions& opts = {}) const;

    /// detect(forensic_encode(pooled or token-mean, d), head) for one image, no language model.
    ag::Var detection_logit(const Image& image, const RunContext& ctx = {}) const;

    /// Greedy decoding until <eos> or max_tokens.
    std::string generate(const Image& image, std::string_view system, std::string_view question,
                         std::size_t max_tokens) const;

    const ModelConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    ParameterList parameters() const;

    /// Attention/MLP projections inside transformer blocks, keyed by module path
    /// (e.g. "lm.blocks.0.q_proj").
    std::vector<std::pair<std::string, LoraLinear*>> block_projections();

    VisionBackbone& vision() { return *vision_; }
    LanguageModel& language() { return *lm_; }
    ForensicEmbedding& forensic_embedding() { return embedding_; }
    const ForensicEmbedding& forensic_embedding() const { return embedding_; }
    ForensicProjector& forensic_projector() { return forensic_projector_; }
    LoraLinear& content_projector() { return content_projector_; }
    MlpHead& mlp_head() { return mlp_head_; }
    const MlpHead& mlp_head() const { return mlp_head_; }

    std::uint64_t lm_forward_count() const { return lm_forward_count_.load(); }
    std::size_t max_forensic_tokens_seen() const { return max_forensic_seen_.load(); }
    void reset_counters();

private:
    ag::Var forensic_input(const VisualFeatures& vf) const;
    ag::Var detection_input(const ag::Var& forensic_features) const;

    ModelConfig cfg_;
    Tokenizer tokenizer_;
    std::unique_ptr<VisionBackbone> vision_;
    ForensicEmbedding embedding_;
    ForensicProjector forensic_projector_;
    LoraLinear content_projector_;
    MlpHead mlp_head_;
    std::unique_ptr<LanguageModel> lm_;
    mutable std::atomic<std::uint64_t> lm_forward_count_{0};
    mutable std::atomic<std::size_t> max_forensic_seen_{0};
};

}  // namespace forenx
