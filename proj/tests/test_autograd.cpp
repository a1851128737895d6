#include <doctest.h>

#include "forenx/autograd.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace forenx;
using ag::Var;
using Vars = std::vector<Var>;

namespace {

constexpr double kTol = 1e-6;

void expect_grad_ok(const std::function<Var(const Vars&)>& f, std::vector<Matrix> in, std::vector<std::size_t> wrt) {
    const auto r = gradcheck::check([&](const Vars& v) { return gradcheck::probe(f(v)); }, std::move(in), wrt);
    CHECK_GT(r.checked, 0u);
    CHECK_LT(r.max_rel, kTol);
}

}  // namespace

TEST_CASE("AutogradValues.MatmulMatchesNaiveProduct") {
    std::mt19937_64 rng(1);
    const Matrix a = gen::matrix(rng, 3, 4), b = gen::matrix(rng, 4, 5);
    const Matrix c = ag::matmul(ag::constant(a), ag::constant(b)).value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
            CHECK_NEAR(c(i, j), s, 1e-12);
        }
}

TEST_CASE("AutogradValues.SoftmaxRowsSumToOneAndCausalMasksFuture") {
    std::mt19937_64 rng(2);
    const Matrix s = ag::softmax_rows(ag::constant(gen::matrix(rng, 4, 4, 3.0)), true).value();
    for (std::size_t i = 0; i < 4; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            if (j > i) CHECK_EQ(s(i, j), 0.0);
            z += s(i, j);
        }
        CHECK_NEAR(z, 1.0, 1e-12);
    }
}

TEST_CASE("AutogradValues.LayerNormMatchesOracle") {
    std::mt19937_64 rng(3);
    const Matrix x = gen::matrix(rng, 3, 6), g = gen::matrix(rng, 1, 6), b = gen::matrix(rng, 1, 6);
    const Matrix y = ag::layer_norm(ag::constant(x), ag::constant(g), ag::constant(b)).value();
    CHECK_LT(oracle::max_abs_diff(oracle::layer_norm(oracle::from(x), oracle::from(g), oracle::from(b)), y), 1e-12);
}

TEST_CASE("AutogradValues.BceWithLogitsIsStableForLargeLogits") {
    CHECK_NEAR(ag::bce_with_logits(ag::constant(Matrix(1, 1, 800.0)), 1.0).scalar(), 0.0, 1e-12);
    CHECK_NEAR(ag::bce_with_logits(ag::constant(Matrix(1, 1, -800.0)), 1.0).scalar(), 800.0, 1e-9);
    CHECK_NEAR(ag::bce_with_logits(ag::constant(Matrix(1, 1, 0.0)), 0.0).scalar(), std::log(2.0), 1e-12);
}

TEST_CASE("AutogradValues.NoGradGuardSkipsGraph") {
    Var p = ag::parameter(Matrix(1, 2, 1.0));
    {
        ag::NoGradGuard ng;
        CHECK_FALSE(ag::grad_enabled());
        Var y = ag::scale(p, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(ag::grad_enabled());
}

TEST_CASE("AutogradValues.GradientsAccumulateAcrossBackwardCalls") {
    Var p = ag::parameter(Matrix(1, 3, 1.0));
    ag::backward(ag::sum(ag::scale(p, 2.0)));
    ag::backward(ag::sum(ag::scale(p, 3.0)));
    for (double g : p.grad().data) CHECK_EQ(g, 5.0);
}

TEST_CASE("AutogradValues.ShapeMismatchIsRejected") {
    CHECK_THROWS_AS(ag::matmul(ag::constant(Matrix(2, 3)), ag::constant(Matrix(2, 3))), ValidationError);
    CHECK_THROWS_AS(ag::add(ag::constant(Matrix(2, 3)), ag::constant(Matrix(3, 2))), ValidationError);
}

// ---- Finite-difference checks, one per primitive -----------------------------------------

TEST_CASE("AutogradGrad.Matmul") {
    std::mt19937_64 rng(10);
    expect_grad_ok([](const Vars& v) { return ag::matmul(v[0], v[1]); }, {gen::matrix(rng, 3, 4), gen::matrix(rng, 4, 2)},
                   {0, 1});
}

TEST_CASE("AutogradGrad.Linear") {
    std::mt19937_64 rng(11);
    expect_grad_ok([](const Vars& v) { return ag::linear(v[0], v[1], v[2]); },
                   {gen::matrix(rng, 3, 4), gen::matrix(rng, 5, 4), gen::matrix(rng, 1, 5)}, {0, 1, 2});
}

TEST_CASE("AutogradGrad.TransposeAddMul") {
    std::mt19937_64 rng(12);
    expect_grad_ok([](const Vars& v) { return ag::mul(ag::add(ag::transpose(v[0]), v[1]), v[1]); },
                   {gen::matrix(rng, 4, 3), gen::matrix(rng, 3, 4)}, {0, 1});
}

TEST_CASE("AutogradGrad.RowBroadcasts") {
    std::mt19937_64 rng(13);
    expect_grad_ok([](const Vars& v) { return ag::mul_row(ag::add_row(v[0], v[1]), v[2]); },
                   {gen::matrix(rng, 3, 4), gen::matrix(rng, 1, 4), gen::matrix(rng, 1, 4)}, {0, 1, 2});
}

TEST_CASE("AutogradGrad.ScaleGelu") {
    std::mt19937_64 rng(14);
    expect_grad_ok([](const Vars& v) { return ag::gelu(ag::scale(v[0], 1.7)); }, {gen::matrix(rng, 3, 5, 2.0)}, {0});
}

TEST_CASE("AutogradGrad.SumMeanRows") {
    std::mt19937_64 rng(15);
    expect_grad_ok([](const Vars& v) { return ag::mean_rows(v[0]); }, {gen::matrix(rng, 4, 3)}, {0});
    const auto r = gradcheck::check([](const Vars& v) { return ag::sum(v[0]); }, {gen::matrix(rng, 2, 3)}, {0});
    CHECK_LT(r.max_rel, kTol);
}

TEST_CASE("AutogradGrad.SlicesAndConcats") {
    std::mt19937_64 rng(16);
    expect_grad_ok(
        [](const Vars& v) {
            std::vector<Var> rows{ag::slice_rows(v[0], 1, 2), v[1]};
            std::vector<Var> cols{ag::slice_cols(ag::concat_rows(rows), 0, 2), ag::slice_cols(ag::slice_rows(v[0], 0, 3), 1, 2)};
            return ag::concat_cols(std::vector<Var>{ag::slice_rows(ag::concat_cols(cols), 0, 2)});
        },
        {gen::matrix(rng, 4, 3), gen::matrix(rng, 1, 3)}, {0, 1});
}

TEST_CASE("AutogradGrad.GatherRowsRepeatsAccumulate") {
    std::mt19937_64 rng(17);
    const std::vector<int> ids{2, 0, 2, 1};
    expect_grad_ok([&](const Vars& v) { return ag::gather_rows(v[0], ids); }, {gen::matrix(rng, 3, 4)}, {0});
}

TEST_CASE("AutogradGrad.LayerNorm") {
    std::mt19937_64 rng(18);
    expect_grad_ok([](const Vars& v) { return ag::layer_norm(v[0], v[1], v[2]); },
                   {gen::matrix(rng, 3, 6), gen::matrix(rng, 1, 6), gen::matrix(rng, 1, 6)}, {0, 1, 2});
}

TEST_CASE("AutogradGrad.SoftmaxPlainAndCausal") {
    std::mt19937_64 rng(19);
    for (bool causal : {false, true}) {
        expect_grad_ok([&](const Vars& v) { return ag::softmax_rows(v[0], causal); }, {gen::matrix(rng, 4, 4)}, {0});
    }
}

TEST_CASE("AutogradGrad.BceWithLogits") {
    for (double t : {0.0, 1.0}) {
        for (double z : {-3.0, -0.2, 0.0, 0.7, 4.0}) {
            const auto r = gradcheck::check([&](const Vars& v) { return ag::bce_with_logits(v[0], t); },
                                            {Matrix(1, 1, z)}, {0});
            INFO("t=", t, " z=", z);
            CHECK_LT(r.max_rel, kTol);
        }
    }
}

TEST_CASE("AutogradGrad.MaskedNextTokenCrossEntropy") {
    std::mt19937_64 rng(20);
    const std::vector<int> targets{3, 1, 4, 1, 5};
    const bool mask[] = {false, true, true, false, true};
    const auto r = gradcheck::check(
        [&](const Vars& v) { return ag::masked_next_token_ce(v[0], targets, mask).total; },
        {gen::matrix(rng, 5, 7)}, {0});
    CHECK_LT(r.max_rel, kTol);
}

TEST_CASE("AutogradGrad.AttentionComposite") {
    std::mt19937_64 rng(21);
    expect_grad_ok(
        [](const Vars& v) {
            Var s = ag::scale(ag::matmul(v[0], ag::transpose(v[1])), 0.5);
            return ag::matmul(ag::softmax_rows(s, true), v[2]);
        },
        {gen::matrix(rng, 4, 3), gen::matrix(rng, 4, 3), gen::matrix(rng, 4, 2)}, {0, 1, 2});
}
