#include "forenx/nn.hpp"

#include <cmath>

namespace forenx {

const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::VisionBase: return "vision_base";
        case ParamGroup::VisionLora: return "vision_lora";
        case ParamGroup::ForensicEmbedding: return "forensic_embedding";
        case ParamGroup::TokenReducer: return "token_reducer";
        case ParamGroup::ForensicProjector: return "forensic_projector";
        case ParamGroup::ContentProjector: return "content_projector";
        case ParamGroup::DetectionHead: return "detection_head";
        case ParamGroup::LanguageBase: return "language_base";
        case ParamGroup::LanguageLora: return "language_lora";
    }
    return "unknown";
}

LoraLinear::LoraLinear(std::size_t in, std::size_t out, bool bias, double init_std,
                       std::mt19937_64& rng)
    : weight_(ag::parameter(random_normal(out, in, init_std, rng))) {
    if (bias) bias_ = ag::parameter(Matrix(1, out));
}

ag::Var LoraLinear::forward(const ag::Var& x, const RunContext& ctx) const {
    ag::Var y = ag::linear(x, weight_, bias_);
    if (!adapter_) return y;
    ag::Var h = x;
    if (ctx.training && ctx.rng && adapter_->dropout > 0.0) {
        h = ag::dropout(h, adapter_->dropout, *ctx.rng);
    }
    ag::Var low = ag::linear(ag::linear(h, adapter_->a, {}), adapter_->b, {});
    return ag::add(y, ag::scale(low, adapter_->scaling()));
}

void LoraLinear::attach_adapter(int rank, double alpha, double dropout, std::mt19937_64& rng) {
    if (adapter_) throw ValidationError("projection already carries an adapter");
    if (merged_) throw ValidationError("projection adapter was already merged");
    if (rank < 1) throw ValidationError("adapter rank must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("adapter dropout must be in [0, 1)");
    const auto r = static_cast<std::size_t>(rank);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    LoraAdapter ad;
    ad.a = ag::parameter(random_uniform(r, in_features(), bound, rng));
    ad.b = ag::parameter(Matrix(out_features(), r));
    ad.rank = rank;
    ad.alpha = alpha;
    ad.dropout = dropout;
    adapter_ = std::move(ad);
}

void LoraLinear::merge_adapter() {
    if (merged_) throw ValidationError("adapter already merged");
    if (!adapter_) throw ValidationError("no adapter to merge");
    const Matrix& A = adapter_->a.value();
    const Matrix& B = adapter_->b.value();
    Matrix& W = weight_.mutable_value();
    const double s = adapter_->scaling();
    for (std::size_t o = 0; o < W.rows; ++o) {
        for (std::size_t i = 0; i < W.cols; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < A.rows; ++k) acc += B(o, k) * A(k, i);
            W(o, i) += s * acc;
        }
    }
    adapter_.reset();
    merged_ = true;
}

void LoraLinear::collect(const std::string& prefix, ParamGroup base_group,
                         ParamGroup adapter_group, ParameterList& out) const {
    out.push_back({prefix + ".weight", base_group, weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", base_group, bias_});
    if (adapter_) {
        out.push_back({prefix + ".lora_A", adapter_group, adapter_->a});
        out.push_back({prefix + ".lora_B", adapter_group, adapter_->b});
    }
}

LayerNormParams::LayerNormParams(std::size_t width)
    : gamma(ag::parameter(Matrix(1, width, 1.0))), beta(ag::parameter(Matrix(1, width))) {}

void LayerNormParams::collect(const std::string& prefix, ParamGroup group,
                              ParameterList& out) const {
    out.push_back({prefix + ".gamma", group, gamma});
    out.push_back({prefix + ".beta", group, beta});
}

TransformerBlock::TransformerBlock(std::size_t width, std::size_t heads, std::size_t mlp_width,
                                   bool causal, double init_std, std::mt19937_64& rng)
    : width_(width),
      heads_(heads),
      causal_(causal),
      ln1_(width),
      ln2_(width),
      q_proj_(width, width, true, init_std, rng),
      k_proj_(width, width, true, init_std, rng),
      v_proj_(width, width, true, init_std, rng),
      o_proj_(width, width, true, init_std, rng),
      fc1_(width, mlp_width, true, init_std, rng),
      fc2_(mlp_width, width, true, init_std, rng) {
    if (heads == 0 || width % heads != 0) {
        throw ValidationError("width " + std::to_string(width) + " not divisible by " +
                              std::to_string(heads) + " heads");
    }
}

ag::Var TransformerBlock::forward(const ag::Var& x, const RunContext& ctx) const {
    ag::Var h = ln1_.forward(x);
    ag::Var q = q_proj_.forward(h, ctx);
    ag::Var k = k_proj_.forward(h, ctx);
    ag::Var v = v_proj_.forward(h, ctx);
    const std::size_t dh = width_ / heads_;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ag::Var> outs;
    outs.reserve(heads_);
    for (std::size_t hd = 0; hd < heads_; ++hd) {
        ag::Var qh = ag::slice_cols(q, hd * dh, dh);
        ag::Var kh = ag::slice_cols(k, hd * dh, dh);
        ag::Var vh = ag::slice_cols(v, hd * dh, dh);
        ag::Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv);
        outs.push_back(ag::matmul(ag::softmax_rows(scores, causal_), vh));
    }
    ag::Var attn = heads_ == 1 ? outs.front() : ag::concat_cols(outs);
    ag::Var x1 = ag::add(x, o_proj_.forward(attn, ctx));
    ag::Var m = fc2_.forward(ag::gelu(fc1_.forward(ln2_.forward(x1), ctx)), ctx);
    return ag::add(x1, m);
}

LoraLinear& TransformerBlock::projection(const std::string& name) {
    return const_cast<LoraLinear&>(std::as_const(*this).projection(name));
}

const LoraLinear& TransformerBlock::projection(const std::string& name) const {
    if (name == "q" || name == "q_proj") return q_proj_;
    if (name == "k" || name == "k_proj") return k_proj_;
    if (name == "v" || name == "v_proj") return v_proj_;
    if (name == "o" || name == "o_proj") return o_proj_;
    if (name == "fc1") return fc1_;
    if (name == "fc2") return fc2_;
    throw ValidationError("unknown projection '" + name + "'");
}

std::vector<LoraLinear*> TransformerBlock::all_projections() {
    return {&q_proj_, &k_proj_, &v_proj_, &o_proj_, &fc1_, &fc2_};
}

void TransformerBlock::collect(const std::string& prefix, ParamGroup base_group,
                               ParamGroup adapter_group, ParameterList& out) const {
    ln1_.collect(prefix + ".ln1", base_group, out);
    q_proj_.collect(prefix + ".q_proj", base_group, adapter_group, out);
    k_proj_.collect(prefix + ".k_proj", base_group, adapter_group, out);
    v_proj_.collect(prefix + ".v_proj", base_group, adapter_group, out);
    o_proj_.collect(prefix + ".o_proj", base_group, adapter_group, out);
    ln2_.collect(prefix + ".ln2", base_group, out);
    fc1_.collect(prefix + ".fc1", base_group, adapter_group, out);
    fc2_.collect(prefix + ".fc2", base_group, adapter_group, out);
}

}  // namespace forenx
