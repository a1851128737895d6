#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// Every op records its parents and a closure that pushes the output gradient
// back into them. Graphs are built per forward call and released when the
// last Var referencing them goes away. Parameters are leaf nodes that keep
// accumulating gradients until zero_grad().

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "forenx/tensor.hpp"

namespace forenx::ag {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Matrix& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::size_t rows() const { return node_->value.rows; }
    std::size_t cols() const { return node_->value.cols; }
    double scalar() const;
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
Var parameter(Matrix value);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Runs backpropagation from a 1x1 root.
void backward(const Var& root);

// Linear algebra
Var matmul(const Var& a, const Var& b);
/// x W^T + b, with W stored [out x in] and b [1 x out] (b may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
/// Adds a 1 x n row to every row of a.
Var add_row(const Var& a, const Var& row);
Var mul(const Var& a, const Var& b);
/// Multiplies every row of a elementwise by a 1 x n row.
Var mul_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var gelu(const Var& a);
Var detach(const Var& a);
Var dropout(const Var& a, double p, std::mt19937_64& rng);

// Reductions
Var sum(const Var& a);
Var mean_rows(const Var& a);

// Shape
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const int> ids);

// Normalization / attention
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Row-wise softmax; with causal set, entries above the diagonal are masked out.
Var softmax_rows(const Var& a, bool causal);

// Losses
/// Binary cross-entropy on logistic(logit), logit given as 1x1.
Var bce_with_logits(const Var& logit, double target);

struct MaskedCrossEntropy {
    Var total;          // 1x1 sum of per-position losses
    std::size_t count;  // number of contributing positions
};
/// Next-token cross-entropy: row p-1 of logits scores targets[p] wherever mask[p] holds.
MaskedCrossEntropy masked_next_token_ce(const Var& logits, std::span<const int> targets,
                                        std::span<const bool> mask);

double logistic(double x);
double gelu_value(double x);

}  // namespace forenx::ag
