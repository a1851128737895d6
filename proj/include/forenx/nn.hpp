#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "forenx/autograd.hpp"

namespace forenx {

/// Which part of the model a parameter belongs to. Freezing policy is expressed per group.
enum class ParamGroup {
    VisionBase,
    VisionLora,
    ForensicEmbedding,
    TokenReducer,
    ForensicProjector,
    ContentProjector,
    DetectionHead,
    LanguageBase,
    LanguageLora,
};

const char* to_string(ParamGroup g);

struct NamedParameter {
    std::string name;
    ParamGroup group;
    ag::Var var;
};

using ParameterList = std::vector<NamedParameter>;

/// Per-call execution flags. Dropout only fires when training and an RNG is supplied.
struct RunContext {
    bool training = false;
    std::mt19937_64* rng = nullptr;
};

struct LoraAdapter {
    ag::Var a;  // [r x in]
    ag::Var b;  // [out x r]
    int rank = 0;
    double alpha = 0.0;
    double dropout = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

/// Affine map y = x W^T + b with an optional low-rank parallel path scaling * (x A^T) B^T.
class LoraLinear {
public:
    LoraLinear() = default;
    LoraLinear(std::size_t in, std::size_t out, bool bias, double init_std, std::mt19937_64& rng);

    ag::Var forward(const ag::Var& x, const RunContext& ctx) const;

    /// A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0.
    void attach_adapter(int rank, double alpha, double dropout, std::mt19937_64& rng);
    /// Folds scaling * B A into W and drops the adapter.
    void merge_adapter();

    bool has_adapter() const { return adapter_.has_value(); }
    bool merged() const { return merged_; }
    const std::optional<LoraAdapter>& adapter() const { return adapter_; }
    std::optional<LoraAdapter>& adapter() { return adapter_; }

    const ag::Var& weight() const { return weight_; }
    const ag::Var& bias() const { return bias_; }
    std::size_t in_features() const { return weight_.cols(); }
    std::size_t out_features() const { return weight_.rows(); }

    void collect(const std::string& prefix, ParamGroup base_group, ParamGroup adapter_group,
                 ParameterList& out) const;

private:
    ag::Var weight_;
    ag::Var bias_;
    std::optional<LoraAdapter> adapter_;
    bool merged_ = false;
};

struct LayerNormParams {
    ag::Var gamma;
    ag::Var beta;

    explicit LayerNormParams(std::size_t width = 0);
    ag::Var forward(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
    void collect(const std::string& prefix, ParamGroup group, ParameterList& out) const;
};

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
class TransformerBlock {
public:
    TransformerBlock(std::size_t width, std::size_t heads, std::size_t mlp_width, bool causal,
                     double init_std, std::mt19937_64& rng);

    ag::Var forward(const ag::Var& x, const RunContext& ctx) const;

    LoraLinear& projection(const std::string& name);
    const LoraLinear& projection(const std::string& name) const;

    void collect(const std::string& prefix, ParamGroup base_group, ParamGroup adapter_group,
                 ParameterList& out) const;

    std::vector<LoraLinear*> all_projections();

private:
    std::size_t width_;
    std::size_t heads_;
    bool causal_;
    LayerNormParams ln1_;
    LayerNormParams ln2_;
    LoraLinear q_proj_;
    LoraLinear k_proj_;
    LoraLinear v_proj_;
    LoraLinear o_proj_;
    LoraLinear fc1_;
    LoraLinear fc2_;
};

}  // namespace forenx
