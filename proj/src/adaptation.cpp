#include "forenx/adaptation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "forenx/hash.hpp"

namespace forenx {

// ---- LoRA -------------------------------------------------------------------

void LoraSpec::validate() const {
    if (rank < 1) throw ValidationError("lora.r must be >= 1, got " + std::to_string(rank));
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ValidationError("lora.dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
    if (!std::isfinite(alpha)) throw ValidationError("lora.alpha must be finite");
    if (targets.empty()) throw ValidationError("lora.targets must not be empty");
}

LoraSpec LoraSpec::toy() {
    LoraSpec s;
    s.dropout = 0.0;
    return s;
}

const char* to_string(Tower t) { return t == Tower::Vision ? "vision" : "language"; }

namespace {

std::vector<TransformerBlock>& tower_blocks(ForenxModel& model, Tower tower) {
    return tower == Tower::Vision ? model.vision().blocks() : model.language().blocks();
}

}  // namespace

void apply_lora(ForenxModel& model, const LoraSpec& spec, Tower tower, std::mt19937_64& rng) {
    spec.validate();
    auto& blocks = tower_blocks(model, tower);
    // Resolve every target before touching the model so a bad name leaves it unchanged.
    std::vector<LoraLinear*> targets;
    for (auto& block : blocks) {
        for (const auto& name : spec.targets) {
            LoraLinear* p = nullptr;
            try {
                p = &block.projection(name);
            } catch (const ValidationError&) {
                throw ValidationError("lora target '" + name + "' not found in " + to_string(tower) +
                                      " tower");
            }
            if (p->has_adapter()) {
                throw ValidationError("lora target '" + name + "' already adapted in " +
                                      to_string(tower) + " tower");
            }
            targets.push_back(p);
        }
    }
    for (LoraLinear* p : targets) p->attach_adapter(spec.rank, spec.alpha, spec.dropout, rng);
}

void merge_lora(ForenxModel& model, Tower tower) {
    std::size_t merged = 0;
    for (auto& block : tower_blocks(model, tower)) {
        for (LoraLinear* p : block.all_projections()) {
            if (p->has_adapter()) {
                p->merge_adapter();
                ++merged;
            }
        }
    }
    if (merged == 0) {
        throw ValidationError(std::string("no adapters to merge in ") + to_string(tower) + " tower");
    }
}

// ---- Losses -----------------------------------------------------------------

void check_binary_label(int y) {
    if (y != 0 && y != 1) {
        throw ValidationError("detection label must be 0 or 1, got " + std::to_string(y));
    }
}

double loss_detection(double logit, int y) {
    check_binary_label(y);
    // log(1 + e^-|z|) + max(z, 0) - y z
    return std::log1p(std::exp(-std::abs(logit))) + std::max(logit, 0.0) - y * logit;
}

ag::Var loss_detection(const ag::Var& logit, int y) {
    check_binary_label(y);
    return ag::bce_with_logits(logit, static_cast<double>(y));
}

double loss_detection_mean(std::span<const double> logits, std::span<const int> labels) {
    if (logits.size() != labels.size()) throw ValidationError("logits/labels length mismatch");
    if (logits.empty()) throw ValidationError("empty detection batch");
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += loss_detection(logits[i], labels[i]);
    return s / static_cast<double>(logits.size());
}

ag::Var loss_instruction(const ag::Var& lm_logits, std::span<const int> targets,
                         std::span<const bool> loss_mask, bool training) {
    auto ce = ag::masked_next_token_ce(lm_logits, targets, loss_mask);
    if (ce.count == 0) {
        if (training) throw ValidationError("instruction loss: empty loss mask in training batch");
        return ag::constant(Matrix(1, 1, 0.0));
    }
    return ag::scale(ce.total, 1.0 / static_cast<double>(ce.count));
}

ag::Var loss_instruction(const ag::Var& lm_logits, const TokenSequence& seq, bool training) {
    // std::vector<bool> is bit-packed, so copy into contiguous storage for the span.
    const std::size_t n = seq.loss_mask.size();
    std::unique_ptr<bool[]> mask(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) mask[i] = seq.loss_mask[i];
    return loss_instruction(lm_logits, seq.token_ids, std::span<const bool>(mask.get(), n), training);
}

namespace {

void check_stage(int stage) {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2, got " + std::to_string(stage));
}

}  // namespace

double total_loss(double l_det, double l_inst, int stage, bool enable_detection_loss,
                  const LossWeights& w) {
    check_stage(stage);
    if (stage == 2) return l_inst;
    if (!enable_detection_loss) return w.instruction * l_inst;
    return w.detection * l_det + w.instruction * l_inst;
}

ag::Var total_loss(const ag::Var& l_det, const ag::Var& l_inst, int stage,
                   bool enable_detection_loss, const LossWeights& w) {
    check_stage(stage);
    auto weighted = [](const ag::Var& v, double k) { return k == 1.0 ? v : ag::scale(v, k); };
    const bool use_det = stage == 1 && enable_detection_loss && l_det.defined();
    if (stage == 2) {
        if (!l_inst.defined()) throw ValidationError("stage 2 requires the instruction loss");
        return l_inst;
    }
    if (use_det && l_inst.defined()) {
        return ag::add(weighted(l_det, w.detection), weighted(l_inst, w.instruction));
    }
    if (use_det) return weighted(l_det, w.detection);
    if (l_inst.defined()) return weighted(l_inst, w.instruction);
    throw ValidationError("total_loss: no loss term in effect");
}

// ---- Stage planning -----------------------------------------------------------

bool is_base_group(ParamGroup g) { return g == ParamGroup::VisionBase || g == ParamGroup::LanguageBase; }

StagePlan StagePlan::for_stage(int stage, const ModelConfig& cfg) {
    check_stage(stage);
    StagePlan p;
    p.stage = stage;
    if (stage == 2) {
        p.trainable = {ParamGroup::LanguageLora};
        p.detection_loss = false;
        p.instruction_loss = true;
        return p;
    }
    const bool forensic_tokens = cfg.enable_llm && cfg.enable_forensic_projector;
    // Without a language model the detection objective is the classifier's own loss.
    p.detection_loss = cfg.enable_detection_loss || !cfg.enable_llm;
    p.instruction_loss = cfg.enable_llm;
    if (cfg.enable_vision_lora) p.trainable.insert(ParamGroup::VisionLora);
    if (cfg.enable_llm) {
        p.trainable.insert(ParamGroup::LanguageLora);
        p.trainable.insert(ParamGroup::ContentProjector);
    }
    if (forensic_tokens) {
        p.trainable.insert(ParamGroup::ForensicProjector);
        if (cfg.forensic_mode == ForensicMode::All) p.trainable.insert(ParamGroup::TokenReducer);
    }
    const bool d_reached = (cfg.enable_llm && cfg.enable_detection_loss) ||
                           (forensic_tokens && cfg.instruction_grad_to_embedding);
    if (d_reached) p.trainable.insert(ParamGroup::ForensicEmbedding);
    if (p.detection_loss && cfg.detector_head == DetectorHead::Mlp) {
        p.trainable.insert(ParamGroup::DetectionHead);
    }
    return p;
}

void StagePlan::validate(const ModelConfig& cfg) const {
    check_stage(stage);
    for (ParamGroup g : trainable) {
        if (is_base_group(g)) {
            throw ValidationError(std::string("stage plan marks base group ") + to_string(g) +
                                  " trainable");
        }
    }
    if (stage == 2) {
        if (trainable != std::set<ParamGroup>{ParamGroup::LanguageLora}) {
            throw ValidationError("stage 2 trains the language adapters only");
        }
        if (detection_loss) throw ValidationError("stage 2 uses the instruction loss only");
        if (!cfg.enable_llm) throw ValidationError("stage 2 requires the language model");
    }
    if (!detection_loss && !instruction_loss) throw ValidationError("stage plan has no loss term");
    if (instruction_loss && !cfg.enable_llm) {
        throw ValidationError("instruction loss requires the language model");
    }
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (batch_size == 0) throw ValidationError("batch size must be positive");
    if (epochs == 0 && max_steps == 0) throw ValidationError("epochs must be positive");
    if (!(clip_norm > 0.0)) throw ValidationError("clip norm must be positive");
}

// ---- Optimizer ------------------------------------------------------------------

double clip_grad_norm(const ParameterList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.var.requires_grad()) continue;
        for (double g : p.var.grad().data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double k = max_norm / norm;
        for (const auto& p : params) {
            if (!p.var.requires_grad()) continue;
            for (double& g : p.var.node()->grad.data) g *= k;
        }
    }
    return norm;
}

void adam_step(const ParameterList& params, TrainState& state, double lr) {
    ++state.step;
    const auto& c = state.adam;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (const auto& p : params) {
        if (!p.var.requires_grad()) continue;
        Matrix& w = p.var.node()->value;
        const Matrix& g = p.var.node()->ensure_grad();
        auto [mit, m_new] = state.m.try_emplace(p.name, w.rows, w.cols);
        auto [vit, v_new] = state.v.try_emplace(p.name, w.rows, w.cols);
        Matrix& m = mit->second;
        Matrix& v = vit->second;
        for (std::size_t i = 0; i < w.data.size(); ++i) {
            m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g.data[i];
            v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g.data[i] * g.data[i];
            const double mh = m.data[i] / bc1;
            const double vh = v.data[i] / bc2;
            w.data[i] -= lr * mh / (std::sqrt(vh) + c.eps);
        }
    }
}

FreezeScope::FreezeScope(const ParameterList& params, const std::set<ParamGroup>& trainable) {
    for (const auto& p : params) {
        const auto& node = p.var.node();
        saved_.emplace_back(node, node->requires_grad);
        node->requires_grad = trainable.count(p.group) > 0;
    }
}

FreezeScope::~FreezeScope() {
    for (auto& [node, flag] : saved_) node->requires_grad = flag;
}

// ---- Metrics ------------------------------------------------------------------

MetricsLog::MetricsLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open metrics log " + path.string());
}

void MetricsLog::append(const StepMetrics& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["l_det"] = m.l_det ? nlohmann::ordered_json(*m.l_det) : nlohmann::ordered_json(nullptr);
    j["l_inst"] = m.l_inst ? nlohmann::ordered_json(*m.l_inst) : nlohmann::ordered_json(nullptr);
    j["l_total"] = m.l_total;
    std::lock_guard<std::mutex> lock(mu_);
    records_.push_back(m);
    if (out_.is_open()) out_ << j.dump() << '\n' << std::flush;
}

// ---- Training -----------------------------------------------------------------------

namespace {

void zero_grads(const ParameterList& params) {
    for (const auto& p : params) {
        if (p.var.requires_grad()) p.var.node()->ensure_grad().fill(0.0);
    }
}

bool grads_finite(const ParameterList& params) {
    for (const auto& p : params) {
        if (p.var.requires_grad() && !p.var.grad().all_finite()) return false;
    }
    return true;
}

}  // namespace

TrainResult train(const StagePlan& plan, std::span<const Example> data, ForenxModel& model,
                  TrainState& state, MetricsLog* log) {
    const ModelConfig& cfg = model.config();
    plan.validate(cfg);
    if (data.empty()) throw ValidationError("training set is empty");
    for (const auto& ex : data) {
        if (!ex.image) throw ValidationError("training example without image");
        if (plan.detection_loss) check_binary_label(ex.label);
        if (plan.instruction_loss && !ex.answer) {
            throw ValidationError("training example without answer text");
        }
    }
    const ParameterList params = model.parameters();
    FreezeScope freeze(params, plan.trainable);
    state.frozen.clear();
    for (const auto& p : params) state.frozen[p.group] = !plan.trains(p.group);

    ForwardOptions opts;
    opts.ctx.training = true;
    opts.ctx.rng = &state.rng;
    opts.compute_detection = plan.detection_loss;
    opts.compute_language = plan.instruction_loss;

    std::vector<std::size_t> order(data.size());
    TrainResult result;
    const std::size_t epochs = plan.max_steps > 0 ? std::numeric_limits<std::size_t>::max() : plan.epochs;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), state.rng);
        for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
            const std::size_t end = std::min(order.size(), start + plan.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            const std::uint64_t step_index = state.step;
            zero_grads(params);
            double det_sum = 0.0, inst_sum = 0.0, total_sum = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const Example& ex = data[order[i]];
                ForwardOutput out;
                try {
                    out = model.forward(ex, opts);
                } catch (const NonFiniteError& e) {
                    throw TrainingAborted(step_index, e.what());
                }
                ag::Var l_det, l_inst;
                if (plan.detection_loss) {
                    l_det = loss_detection(out.detection_logit, ex.label);
                    det_sum += l_det.scalar();
                }
                if (plan.instruction_loss) {
                    l_inst = loss_instruction(out.lm_logits, out.sequence, true);
                    inst_sum += l_inst.scalar();
                }
                ag::Var total = total_loss(l_det, l_inst, plan.stage, plan.detection_loss, plan.weights);
                if (!std::isfinite(total.scalar())) {
                    throw TrainingAborted(step_index, "non-finite loss");
                }
                total_sum += total.scalar();
                ag::backward(ag::scale(total, inv_b));
            }
            if (!grads_finite(params)) throw TrainingAborted(step_index, "non-finite gradient");
            clip_grad_norm(params, plan.clip_norm);
            adam_step(params, state, plan.learning_rate);

            StepMetrics m;
            m.step = step_index;
            if (plan.detection_loss) m.l_det = det_sum * inv_b;
            if (plan.instruction_loss) m.l_inst = inst_sum * inv_b;
            m.l_total = total_sum * inv_b;
            state.loss_sum += m.l_total;
            ++state.loss_count;
            if (log) log->append(m);
            ++result.steps;
            result.final_loss = m.l_total;
            if (plan.max_steps > 0 && result.steps >= plan.max_steps) return result;
        }
    }
    return result;
}

double detection_accuracy(const ForenxModel& model, std::span<const Example> data) {
    ag::NoGradGuard no_grad;
    std::unordered_set<const Image*> seen;
    std::size_t n = 0, correct = 0;
    for (const auto& ex : data) {
        if (!ex.image || !seen.insert(ex.image).second) continue;
        check_binary_label(ex.label);
        const int pred = model.detection_logit(*ex.image).scalar() > 0.0 ? 1 : 0;
        ++n;
        if (pred == ex.label) ++correct;
    }
    if (n == 0) throw ValidationError("detection_accuracy: no labelled images");
    return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

constexpr double kCueStd = 0.5;

double answer_polarity(const std::string& answer) {
    std::size_t i = 0;
    while (i < answer.size() && !std::isalpha(static_cast<unsigned char>(answer[i]))) ++i;
    std::size_t j = i;
    while (j < answer.size() && std::isalpha(static_cast<unsigned char>(answer[j]))) ++j;
    std::string w = answer.substr(i, j - i);
    for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (w == "yes") return 1.0;
    if (w == "no") return -1.0;
    return 0.0;
}

}  // namespace

double pretrain_language(ForenxModel& model, std::span<const TextExample> texts,
                         const PretrainPlan& plan, MetricsLog* log) {
    if (texts.empty()) throw ValidationError("pretraining corpus is empty");
    if (plan.batch_size == 0 || plan.steps == 0) throw ValidationError("pretraining needs steps and batch size");
    const ModelConfig& cfg = model.config();
    if (!cfg.enable_llm) throw ValidationError("pretraining requires the language model");
    const ParameterList params = model.parameters();
    FreezeScope freeze(params, {ParamGroup::LanguageBase});
    TrainState state(plan.seed);
    RunContext ctx{true, &state.rng};

    // Visual positions are filled with noise of roughly the projected-feature scale, so the
    // answer positions line up with what the full model will see later.
    const std::size_t content_rows = cfg.token_count();
    const std::size_t forensic_rows = cfg.forensic_token_count();
    constexpr double kPlaceholderStd = 0.1;
    // Forensic slots of detection answers also carry +cue (Yes) or -cue (No), so the
    // warmed-up model already reads its answer off that slot.
    std::mt19937_64 cue_rng(plan.seed ^ 0x9e3779b97f4a7c15ULL);
    const Matrix cue = random_normal(1, cfg.lm_width, kCueStd, cue_rng);

    std::vector<std::size_t> order(texts.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    double last = 0.0;
    for (std::size_t step = 0; step < plan.steps; ++step) {
        zero_grads(params);
        double sum = 0.0;
        for (std::size_t b = 0; b < plan.batch_size; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), state.rng);
                cursor = 0;
            }
            const TextExample& t = texts[order[cursor++]];
            ag::Var content = ag::constant(random_normal(content_rows, cfg.lm_width, kPlaceholderStd, state.rng));
            ForensicPromptTokens ftoks;
            if (forensic_rows > 0) {
                Matrix slots = random_normal(forensic_rows, cfg.lm_width, kPlaceholderStd, state.rng);
                if (const double s = answer_polarity(t.answer); s != 0.0) {
                    for (std::size_t r = 0; r < forensic_rows; ++r) {
                        for (std::size_t c = 0; c < cfg.lm_width; ++c) slots(r, c) += s * cue(0, c);
                    }
                }
                ftoks.tokens = ag::constant(std::move(slots));
                ftoks.k = forensic_rows;
            }
            TokenSequence seq = assemble_sequence(t.system, user_turn_text(t.question), content, ftoks,
                                                  t.answer, model.tokenizer(), model.language(),
                                                  cfg.forensic_placement);
            ag::Var logits = model.language().forward(seq.embeddings, ctx);
            ag::Var loss = loss_instruction(logits, seq, true);
            if (!std::isfinite(loss.scalar())) throw TrainingAborted(step, "non-finite pretraining loss");
            sum += loss.scalar();
            ag::backward(ag::scale(loss, 1.0 / static_cast<double>(plan.batch_size)));
        }
        clip_grad_norm(params, plan.clip_norm);
        adam_step(params, state, plan.learning_rate);
        last = sum / static_cast<double>(plan.batch_size);
        if (log) log->append({step, std::nullopt, last, last});
    }
    return last;
}

// ---- Hashing ------------------------------------------------------------------------

std::string parameter_hash(const ForenxModel& model,
                           const std::function<bool(const NamedParameter&)>& select) {
    Sha256 h;
    for (const auto& p : model.parameters()) {
        if (!select(p)) continue;
        const Matrix& v = p.var.value();
        h.update(p.name);
        h.update(v.shape_str());
        h.update(std::span<const double>(v.data));
    }
    return h.hex_digest();
}

std::string parameter_hash(const ForenxModel& model, const std::set<ParamGroup>& groups) {
    return parameter_hash(model, [&](const NamedParameter& p) { return groups.count(p.group) > 0; });
}

std::string parameter_hash(const ForenxModel& model) {
    return parameter_hash(model, [](const NamedParameter&) { return true; });
}

}  // namespace forenx
