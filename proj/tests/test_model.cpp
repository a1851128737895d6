#include <doctest.h>

#include "forenx/adaptation.hpp"
#include "forenx/model.hpp"
#include "support.hpp"

using namespace forenx;
using oracle::Mat;

namespace {

ModelConfig small(ModelConfig c = ModelConfig::toy()) {
    c.init_seed = 5;
    return c;
}

Mat lm_oracle(const ForenxModel& model, const Mat& emb) {
    const auto& cfg = model.config();
    const oracle::Params P(model);
    Mat x = emb;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += P["lm.pos_embed"][i][j];
    for (std::size_t i = 0; i < cfg.lm_layers; ++i)
        x = oracle::block(P, "lm.blocks." + std::to_string(i), x, cfg.lm_heads, true);
    x = oracle::layer_norm(x, P["lm.ln_f.gamma"], P["lm.ln_f.beta"]);
    return oracle::affine(x, P["lm.head.weight"], P["lm.head.bias"]);
}

Mat mlp_oracle(const oracle::Params& P, const std::string& pre, const Mat& x) {
    return oracle::affine(oracle::gelu(oracle::affine(x, P[pre + ".fc1.weight"], P[pre + ".fc1.bias"])),
                          P[pre + ".fc2.weight"], P[pre + ".fc2.bias"]);
}

}  // namespace

TEST_CASE("vision encoder matches a straight-line oracle") {
    ForenxModel model(small());
    perturb(model, 11);
    std::mt19937_64 rng(3);
    std::vector<Image> images{Image::zeros(3, 32, 32)};
    for (int i = 0; i < 4; ++i) images.push_back(gen::image(rng));
    for (const auto& img : images) {
        const VisualFeatures vf = model.encode_image(img);
        const oracle::VisionOut ref = oracle::vision(model, img);
        CHECK_EQ(vf.patch_tokens.rows(), model.config().token_count());
        CHECK_LT(oracle::max_abs_diff(ref.tokens, vf.patch_tokens.value()), 1e-9);
        CHECK_LT(oracle::max_abs_diff(ref.pooled, vf.pooled.value()), 1e-9);
    }
}

TEST_CASE("language model matches a causal oracle") {
    ForenxModel model(small());
    perturb(model, 12);
    std::mt19937_64 rng(4);
    const Matrix emb = gen::matrix(rng, 9, model.config().lm_width);
    const Matrix logits = model.language().forward(ag::constant(emb), {}).value();
    CHECK_LT(oracle::max_abs_diff(lm_oracle(model, oracle::from(emb)), logits), 1e-9);

    // Causality: changing the last position leaves earlier logits untouched.
    Matrix emb2 = emb;
    for (std::size_t c = 0; c < emb2.cols; ++c) emb2(8, c) += 1.0;
    const Matrix logits2 = model.language().forward(ag::constant(emb2), {}).value();
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < logits.cols; ++c) CHECK_EQ(logits(r, c), logits2(r, c));
}

TEST_CASE("forensic encoding with the identity embedding is exact") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix f = gen::matrix(rng, trial % 2 ? 17 : 1, 32, 10.0);
        for (EmbeddingMode m : {EmbeddingMode::Vector, EmbeddingMode::Matrix}) {
            const auto d = ForensicEmbedding::identity(m, 32);
            const Matrix out = forensic_encode(ag::constant(f), d).value();
            CHECK(out.data == f.data);
        }
    }
}

TEST_CASE("forensic encoding matches elementwise and matrix oracles") {
    std::mt19937_64 rng(6);
    const Matrix f = gen::matrix(rng, 17, 8);
    ForensicEmbedding v{EmbeddingMode::Vector, ag::constant(gen::matrix(rng, 1, 8)), true};
    const Matrix hv = forensic_encode(ag::constant(f), v).value();
    for (std::size_t r = 0; r < 17; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK_EQ(hv(r, c), f(r, c) * v.d.value()(0, c));

    ForensicEmbedding m{EmbeddingMode::Matrix, ag::constant(gen::matrix(rng, 8, 8)), true};
    const Matrix hm = forensic_encode(ag::constant(f), m).value();
    for (std::size_t r = 0; r < 17; ++r)
        for (std::size_t c = 0; c < 8; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < 8; ++k) s += f(r, k) * m.d.value()(k, c);
            CHECK_NEAR(hm(r, c), s, 1e-12);
        }

    ForensicEmbedding bad{EmbeddingMode::Vector, ag::constant(Matrix(1, 7, 1.0)), true};
    CHECK_THROWS_AS(forensic_encode(ag::constant(f), bad), ValidationError);
}

TEST_CASE("sum head is linear in its input") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix x = gen::matrix(rng, 1, 32), y = gen::matrix(rng, 1, 32);
        const double a = u(rng), b = u(rng);
        Matrix z(1, 32);
        for (std::size_t i = 0; i < 32; ++i) z.data[i] = a * x.data[i] + b * y.data[i];
        const double lhs = detect(ag::constant(z), DetectorHead::Sum, nullptr).scalar();
        const double rhs = a * detect(ag::constant(x), DetectorHead::Sum, nullptr).scalar() +
                           b * detect(ag::constant(y), DetectorHead::Sum, nullptr).scalar();
        CHECK_NEAR(lhs, rhs, 1e-9);
    }
}

TEST_CASE("detect rejects non-finite input and a missing mlp") {
    Matrix x(1, 4, 1.0);
    x.data[2] = std::nan("");
    CHECK_THROWS_AS(detect(ag::constant(x), DetectorHead::Sum, nullptr), ValidationError);
    CHECK_THROWS_AS(detect(ag::constant(Matrix(1, 4, 1.0)), DetectorHead::Mlp, nullptr), ValidationError);
}

TEST_CASE("mlp head, content projector and forensic projector match oracles") {
    ModelConfig cfg = small();
    cfg.detector_head = DetectorHead::Mlp;
    ForenxModel model(cfg);
    perturb(model, 13);
    const oracle::Params P(model);
    std::mt19937_64 rng(8);
    const Matrix pooled = gen::matrix(rng, 1, 32);
    const Matrix tokens = gen::matrix(rng, 17, 32);

    const double logit = detect(ag::constant(pooled), DetectorHead::Mlp, &model.mlp_head()).scalar();
    CHECK_NEAR(logit, mlp_oracle(P, "detector", oracle::from(pooled))[0][0], 1e-10);

    const Matrix content = project_content(ag::constant(tokens), model.content_projector()).value();
    CHECK_LT(oracle::max_abs_diff(oracle::affine(oracle::from(tokens), P["content_projector.weight"],
                                                 P["content_projector.bias"]),
                                  content),
             1e-10);

    const auto one = project_forensic(ag::constant(pooled), ForensicMode::Pooler, &model.forensic_projector());
    CHECK_EQ(one.k, 1u);
    CHECK_LT(oracle::max_abs_diff(mlp_oracle(P, "forensic.mapper", oracle::from(pooled)), one.tokens.value()), 1e-10);

    const auto all = project_forensic(ag::constant(tokens), ForensicMode::All, &model.forensic_projector());
    CHECK_EQ(all.k, 16u);
    const Mat& R = P["forensic.token_reducer"];
    Mat reduced = oracle::zeros(16, 32);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t t = 0; t < 17; ++t)
            for (std::size_t c = 0; c < 32; ++c) reduced[i][c] += R[i][t] * tokens(t, c);
    CHECK_LT(oracle::max_abs_diff(mlp_oracle(P, "forensic.mapper", reduced), all.tokens.value()), 1e-10);

    CHECK_EQ(project_forensic(ag::constant(pooled), ForensicMode::Pooler, nullptr).k, 0u);
    CHECK_THROWS_AS(project_forensic(ag::constant(tokens), ForensicMode::Pooler, &model.forensic_projector()),
                    ValidationError);
}

TEST_CASE("detection logit agrees with the full forward pass in every mode") {
    std::mt19937_64 rng(9);
    const Image img = gen::image(rng);
    for (ForensicMode fm : {ForensicMode::Pooler, ForensicMode::All})
        for (DetectorHead h : {DetectorHead::Sum, DetectorHead::Mlp})
            for (EmbeddingMode em : {EmbeddingMode::Vector, EmbeddingMode::Matrix}) {
                ModelConfig cfg = small();
                cfg.forensic_mode = fm;
                cfg.detector_head = h;
                cfg.embedding_mode = em;
                ForenxModel model(cfg);
                perturb(model, 14, 0.1);
                Example ex{&img, "sys", "is it fake?", std::nullopt, 1};
                const ForwardOutput out = model.forward(ex);
                CHECK_EQ(out.detection_logit.scalar(), model.detection_logit(img).scalar());

                // Independent composition: vision oracle, encode, reduce, head.
                const auto vo = oracle::vision(model, img);
                const Mat& src = fm == ForensicMode::Pooler ? vo.pooled : vo.tokens;
                const Mat d = oracle::Params(model)["forensic.embedding"];
                Mat ff = src;
                for (auto& row : ff) {
                    std::vector<double> r2(row.size(), 0.0);
                    for (std::size_t c = 0; c < row.size(); ++c) {
                        if (em == EmbeddingMode::Vector) {
                            r2[c] = row[c] * d[0][c];
                        } else {
                            for (std::size_t k = 0; k < row.size(); ++k) r2[c] += row[k] * d[k][c];
                        }
                    }
                    row = r2;
                }
                Mat pooled = oracle::zeros(1, ff[0].size());
                for (const auto& row : ff)
                    for (std::size_t c = 0; c < row.size(); ++c) pooled[0][c] += row[c] / static_cast<double>(ff.size());
                double expect = 0.0;
                if (h == DetectorHead::Sum) {
                    for (double v : pooled[0]) expect += v;
                } else {
                    expect = mlp_oracle(oracle::Params(model), "detector", pooled)[0][0];
                }
                CHECK_NEAR(out.detection_logit.scalar(), expect, 1e-8);
            }
}

TEST_CASE("sequence layout follows segment order and masks only the answer") {
    std::mt19937_64 rng(10);
    const Image img = gen::image(rng);
    struct Case {
        ForensicMode mode;
        bool projector;
        ForensicPlacement placement;
        std::size_t k;
    };
    for (const Case c : {Case{ForensicMode::Pooler, true, ForensicPlacement::AfterContent, 1},
                         Case{ForensicMode::All, true, ForensicPlacement::AfterContent, 16},
                         Case{ForensicMode::Pooler, false, ForensicPlacement::AfterContent, 0},
                         Case{ForensicMode::Pooler, true, ForensicPlacement::BeforeContent, 1}}) {
        ModelConfig cfg = small();
        cfg.forensic_mode = c.mode;
        cfg.enable_forensic_projector = c.projector;
        cfg.forensic_placement = c.placement;
        ForenxModel model(cfg);
        Example ex{&img, "You are an assistant.", "Is this fake?", std::string("yes, it is."), 1};
        const TokenSequence seq = model.forward(ex).sequence;

        CHECK_EQ(seq.count(Segment::Forensic), c.k);
        CHECK_EQ(seq.count(Segment::ContentVisual), cfg.token_count());
        CHECK_EQ(seq.embeddings.rows(), seq.length());
        CHECK_EQ(seq.token_ids.front(), Tokenizer::kBos);
        CHECK_EQ(seq.token_ids.back(), Tokenizer::kEos);
        CHECK_EQ(seq.segments.back(), Segment::Answer);

        // Segments are contiguous and appear in the configured order.
        std::vector<Segment> order;
        for (Segment s : seq.segments)
            if (order.empty() || order.back() != s) order.push_back(s);
        std::vector<Segment> expect{Segment::System};
        if (c.placement == ForensicPlacement::BeforeContent && c.k) expect.push_back(Segment::Forensic);
        expect.push_back(Segment::ContentVisual);
        if (c.placement == ForensicPlacement::AfterContent && c.k) expect.push_back(Segment::Forensic);
        expect.push_back(Segment::User);
        expect.push_back(Segment::Answer);
        CHECK(order == expect);

        for (std::size_t i = 0; i < seq.length(); ++i) {
            CHECK_EQ(seq.loss_mask[i], seq.segments[i] == Segment::Answer);
            const bool visual = seq.segments[i] == Segment::ContentVisual || seq.segments[i] == Segment::Forensic;
            CHECK_EQ(seq.token_ids[i] < 0, visual);
        }
        CHECK_EQ(model.max_forensic_tokens_seen(), c.k);
    }
}

TEST_CASE("language model is skipped when disabled") {
    ModelConfig cfg = small();
    cfg.enable_llm = false;
    ForenxModel model(cfg);
    std::mt19937_64 rng(11);
    const Image img = gen::image(rng);
    Example ex{&img, "", "q", std::nullopt, 0};
    const ForwardOutput out = model.forward(ex);
    CHECK(out.detection_logit.defined());
    CHECK_FALSE(out.lm_logits.defined());
    CHECK_EQ(model.lm_forward_count(), 0u);
    CHECK_THROWS_AS(model.generate(img, "", "q", 4), ValidationError);
}

TEST_CASE("initialization and generation are deterministic") {
    std::mt19937_64 rng(12);
    const Image img = gen::image(rng);
    ForenxModel a(small()), b(small());
    CHECK_EQ(parameter_hash(a), parameter_hash(b));
    ModelConfig other = small();
    other.init_seed = 6;
    CHECK_NE(parameter_hash(ForenxModel(other)), parameter_hash(a));
    const std::string ga = a.generate(img, "sys", "fake?", 6);
    CHECK_EQ(ga, b.generate(img, "sys", "fake?", 6));
    CHECK_GT(a.lm_forward_count(), 0u);
}

TEST_CASE("full-shape profile fixes the large geometry") {
    const ModelConfig c = ModelConfig::full_shape();
    CHECK_EQ(c.token_count(), 577u);
    CHECK_EQ(c.vision_width, 1024u);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation rejects inconsistent geometry") {
    ModelConfig c = ModelConfig::toy();
    c.patch_size = 7;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = ModelConfig::toy();
    c.vision_heads = 3;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}
