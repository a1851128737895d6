#include "forenx/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace forenx::ag {

namespace {

thread_local bool t_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_result(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (t_grad_enabled) {
        bool any = std::any_of(parents.begin(), parents.end(),
                               [](const NodePtr& p) { return p && p->requires_grad; });
        if (any) {
            node->requires_grad = true;
            node->parents = std::move(parents);
            node->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(node));
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ValidationError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                              b.shape_str());
    }
}

void require_row(const Matrix& a, const Matrix& row, const char* op) {
    if (row.rows != 1 || row.cols != a.cols) {
        throw ValidationError(std::string(op) + ": expected row [1 x " + std::to_string(a.cols) +
                              "], got " + row.shape_str());
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Matrix& Node::ensure_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows, value.cols);
    return grad;
}

double Var::scalar() const {
    if (node_->value.size() != 1) {
        throw ValidationError("scalar() on non-scalar " + node_->value.shape_str());
    }
    return node_->value.data[0];
}

void Var::zero_grad() {
    if (node_->grad.size() != 0) node_->grad.fill(0.0);
}

Var constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var parameter(Matrix value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void backward(const Var& root) {
    if (root.value().size() != 1) {
        throw ValidationError("backward() requires a scalar root, got " + root.value().shape_str());
    }
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients start from zero on every pass; leaves accumulate.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->ensure_grad().fill(0.0);
        } else {
            n->ensure_grad();
        }
    }
    root.node()->grad.data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Var matmul(const Var& a, const Var& b) {
    const Matrix& A = a.value();
    const Matrix& B = b.value();
    if (A.cols != B.rows) {
        throw ValidationError("matmul: " + A.shape_str() + " x " + B.shape_str());
    }
    const std::size_t m = A.rows, k = A.cols, n = B.cols;
    Matrix out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        double* o = &out.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A.data[i * k + p];
            if (av == 0.0) continue;
            const double* br = &B.data[p * n];
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return make_result(std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
        const Matrix& G = self.grad;
        if (an->requires_grad) {
            Matrix& ga = an->ensure_grad();
            const Matrix& Bv = bn->value;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* br = &Bv.data[p * n];
                    const double* gr = &G.data[i * n];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
                    ga.data[i * k + p] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            Matrix& gb = bn->ensure_grad();
            const Matrix& Av = an->value;
            for (std::size_t i = 0; i < m; ++i) {
                const double* gr = &G.data[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = Av.data[i * k + p];
                    if (av == 0.0) continue;
                    double* gbr = &gb.data[p * n];
                    for (std::size_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
                }
            }
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const Matrix& X = x.value();
    const Matrix& W = weight.value();
    if (X.cols != W.cols) {
        throw ValidationError("linear: input " + X.shape_str() + " vs weight " + W.shape_str());
    }
    const std::size_t n = X.rows, in = X.cols, outd = W.rows;
    if (bias.defined() && (bias.rows() != 1 || bias.cols() != outd)) {
        throw ValidationError("linear: bias " + bias.value().shape_str() + " for weight " +
                              W.shape_str());
    }
    Matrix out(n, outd);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = &X.data[i * in];
        for (std::size_t o = 0; o < outd; ++o) {
            const double* wr = &W.data[o * in];
            double acc = 0.0;
            for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
            out.data[i * outd + o] = acc;
        }
    }
    if (bias.defined()) {
        const Matrix& Bv = bias.value();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < outd; ++o) out.data[i * outd + o] += Bv.data[o];
    }
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return make_result(std::move(out), {xn, wn, bn}, [xn, wn, bn, n, in, outd](Node& self) {
        const Matrix& G = self.grad;
        if (xn->requires_grad) {
            Matrix& gx = xn->ensure_grad();
            const Matrix& Wv = wn->value;
            for (std::size_t i = 0; i < n; ++i) {
                double* gxr = &gx.data[i * in];
                for (std::size_t o = 0; o < outd; ++o) {
                    const double g = G.data[i * outd + o];
                    if (g == 0.0) continue;
                    const double* wr = &Wv.data[o * in];
                    for (std::size_t p = 0; p < in; ++p) gxr[p] += g * wr[p];
                }
            }
        }
        if (wn->requires_grad) {
            Matrix& gw = wn->ensure_grad();
            const Matrix& Xv = xn->value;
            for (std::size_t i = 0; i < n; ++i) {
                const double* xr = &Xv.data[i * in];
                for (std::size_t o = 0; o < outd; ++o) {
                    const double g = G.data[i * outd + o];
                    if (g == 0.0) continue;
                    double* gwr = &gw.data[o * in];
                    for (std::size_t p = 0; p < in; ++p) gwr[p] += g * xr[p];
                }
            }
        }
        if (bn && bn->requires_grad) {
            Matrix& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < outd; ++o) gb.data[o] += G.data[i * outd + o];
        }
    });
}

Var transpose(const Var& a) {
    const Matrix& A = a.value();
    Matrix out(A.cols, A.rows);
    for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t j = 0; j < A.cols; ++j) out(j, i) = A(i, j);
    auto an = a.node();
    return make_result(std::move(out), {an}, [an](Node& self) {
        Matrix& ga = an->ensure_grad();
        for (std::size_t i = 0; i < ga.rows; ++i)
            for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += self.grad(j, i);
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    auto an = a.node(), bn = b.node();
    return make_result(std::move(out), {an, bn}, [an, bn](Node& self) {
        for (const auto& p : {an, bn}) {
            if (!p->requires_grad) continue;
            Matrix& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
        }
    });
}

Var add_row(const Var& a, const Var& row) {
    require_row(a.value(), row.value(), "add_row");
    Matrix out = a.value();
    const std::size_t c = out.cols;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += row.value().data[j];
    auto an = a.node(), rn = row.node();
    return make_result(std::move(out), {an, rn}, [an, rn, c](Node& self) {
        if (an->requires_grad) {
            Matrix& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
        }
        if (rn->requires_grad) {
            Matrix& g = rn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.rows; ++i)
                for (std::size_t j = 0; j < c; ++j) g.data[j] += self.grad.data[i * c + j];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    auto an = a.node(), bn = b.node();
    return make_result(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) {
            Matrix& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] += self.grad.data[i] * bn->value.data[i];
        }
        if (bn->requires_grad) {
            Matrix& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] += self.grad.data[i] * an->value.data[i];
        }
    });
}

Var mul_row(const Var& a, const Var& row) {
    require_row(a.value(), row.value(), "mul_row");
    Matrix out = a.value();
    const std::size_t c = out.cols;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] *= row.value().data[j];
    auto an = a.node(), rn = row.node();
    return make_result(std::move(out), {an, rn}, [an, rn, c](Node& self) {
        const std::size_t r = self.grad.rows;
        if (an->requires_grad) {
            Matrix& g = an->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    g.data[i * c + j] += self.grad.data[i * c + j] * rn->value.data[j];
        }
        if (rn->requires_grad) {
            Matrix& g = rn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    g.data[j] += self.grad.data[i * c + j] * an->value.data[i * c + j];
        }
    });
}

Var scale(const Var& a, double s) {
    Matrix out = a.value();
    for (double& v : out.data) v *= s;
    auto an = a.node();
    return make_result(std::move(out), {an}, [an, s](Node& self) {
        Matrix& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
    });
}

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var gelu(const Var& a) {
    Matrix out = a.value();
    for (double& v : out.data) v = gelu_value(v);
    auto an = a.node();
    return make_result(std::move(out), {an}, [an](Node& self) {
        Matrix& g = an->ensure_grad();
        const Matrix& X = an->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = X.data[i];
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            const double d = 0.5 * (1.0 + t) +
                             0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            g.data[i] += d * self.grad.data[i];
        }
    });
}

Var detach(const Var& a) { return constant(a.value()); }

Var dropout(const Var& a, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw ValidationError("dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    Matrix mask(a.rows(), a.cols());
    const double s = 1.0 / (1.0 - p);
    for (double& m : mask.data) m = keep(rng) ? s : 0.0;
    return mul(a, constant(std::move(mask)));
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    auto an = a.node();
    return make_result(Matrix(1, 1, s), {an}, [an](Node& self) {
        Matrix& g = an->ensure_grad();
        const double gs = self.grad.data[0];
        for (double& v : g.data) v += gs;
    });
}

Var mean_rows(const Var& a) {
    const Matrix& A = a.value();
    if (A.rows == 0) throw ValidationError("mean_rows on empty matrix");
    Matrix out(1, A.cols);
    for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t j = 0; j < A.cols; ++j) out.data[j] += A(i, j);
    const double inv = 1.0 / static_cast<double>(A.rows);
    for (double& v : out.data) v *= inv;
    auto an = a.node();
    return make_result(std::move(out), {an}, [an, inv](Node& self) {
        Matrix& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) g(i, j) += inv * self.grad.data[j];
    });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
    const Matrix& A = a.value();
    if (begin + count > A.rows) {
        throw ValidationError("slice_rows out of range on " + A.shape_str());
    }
    Matrix out(count, A.cols);
    std::copy(A.data.begin() + begin * A.cols, A.data.begin() + (begin + count) * A.cols,
              out.data.begin());
    auto an = a.node();
    return make_result(std::move(out), {an}, [an, begin](Node& self) {
        Matrix& g = an->ensure_grad();
        const std::size_t off = begin * g.cols;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g.data[off + i] += self.grad.data[i];
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    const Matrix& A = a.value();
    if (begin + count > A.cols) {
        throw ValidationError("slice_cols out of range on " + A.shape_str());
    }
    Matrix out(A.rows, count);
    for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = A(i, begin + j);
    auto an = a.node();
    return make_result(std::move(out), {an}, [an, begin, count](Node& self) {
        Matrix& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < count; ++j) g(i, begin + j) += self.grad(i, j);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_rows of nothing");
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.cols() != c) throw ValidationError("concat_rows: column mismatch");
        total += p.rows();
    }
    Matrix out(total, c);
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off * c);
        nodes.push_back(p.node());
        offsets.push_back(off);
        off += p.rows();
    }
    auto captured = nodes;
    return make_result(std::move(out), std::move(nodes), [captured, offsets, c](Node& self) {
        for (std::size_t k = 0; k < captured.size(); ++k) {
            if (!captured[k]->requires_grad) continue;
            Matrix& g = captured[k]->ensure_grad();
            const std::size_t base = offsets[k] * c;
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[base + i];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_cols of nothing");
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (p.rows() != r) throw ValidationError("concat_cols: row mismatch");
        total += p.cols();
    }
    Matrix out(r, total);
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
        nodes.push_back(p.node());
        offsets.push_back(off);
        off += p.cols();
    }
    auto captured = nodes;
    return make_result(std::move(out), std::move(nodes), [captured, offsets](Node& self) {
        for (std::size_t k = 0; k < captured.size(); ++k) {
            if (!captured[k]->requires_grad) continue;
            Matrix& g = captured[k]->ensure_grad();
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) g(i, j) += self.grad(i, offsets[k] + j);
        }
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    const Matrix& T = table.value();
    Matrix out(ids.size(), T.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows) {
            throw ValidationError("gather_rows: id " + std::to_string(ids[i]) +
                                  " outside table of " + std::to_string(T.rows) + " rows");
        }
        std::copy_n(T.data.begin() + ids[i] * T.cols, T.cols, out.data.begin() + i * T.cols);
    }
    auto tn = table.node();
    std::vector<int> idv(ids.begin(), ids.end());
    return make_result(std::move(out), {tn}, [tn, idv](Node& self) {
        Matrix& g = tn->ensure_grad();
        const std::size_t c = g.cols;
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) g.data[idv[i] * c + j] += self.grad.data[i * c + j];
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Matrix& X = x.value();
    require_row(X, gamma.value(), "layer_norm gamma");
    require_row(X, beta.value(), "layer_norm beta");
    const std::size_t r = X.rows, c = X.cols;
    Matrix out(r, c);
    Matrix xhat(r, c);
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += X(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat(i, j) = (X(i, j) - mu) * inv_std[i];
            out(i, j) = xhat(i, j) * gamma.value().data[j] + beta.value().data[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result(std::move(out), {xn, gn, bn},
                       [xn, gn, bn, xhat = std::move(xhat), inv_std, r, c](Node& self) {
        const Matrix& G = self.grad;
        if (gn->requires_grad) {
            Matrix& gg = gn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg.data[j] += G(i, j) * xhat(i, j);
        }
        if (bn->requires_grad) {
            Matrix& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb.data[j] += G(i, j);
        }
        if (xn->requires_grad) {
            Matrix& gx = xn->ensure_grad();
            std::vector<double> dxhat(c);
            for (std::size_t i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dxhat[j] = G(i, j) * gn->value.data[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat(i, j);
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j)
                    gx(i, j) += inv_std[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
            }
        }
    });
}

Var softmax_rows(const Var& a, bool causal) {
    const Matrix& A = a.value();
    Matrix out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const std::size_t limit = causal ? std::min(i + 1, A.cols) : A.cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, A(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            out(i, j) = std::exp(A(i, j) - mx);
            z += out(i, j);
        }
        for (std::size_t j = 0; j < limit; ++j) out(i, j) /= z;
    }
    auto an = a.node();
    Matrix y = out;
    return make_result(std::move(out), {an}, [an, y = std::move(y)](Node& self) {
        Matrix& g = an->ensure_grad();
        for (std::size_t i = 0; i < y.rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols; ++j) dot += self.grad(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.cols; ++j) g(i, j) += y(i, j) * (self.grad(i, j) - dot);
        }
    });
}

double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Var bce_with_logits(const Var& logit, double target) {
    const double x = logit.scalar();
    const double loss = std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
    auto ln = logit.node();
    return make_result(Matrix(1, 1, loss), {ln}, [ln, x, target](Node& self) {
        ln->ensure_grad().data[0] += self.grad.data[0] * (logistic(x) - target);
    });
}

MaskedCrossEntropy masked_next_token_ce(const Var& logits, std::span<const int> targets,
                                        std::span<const bool> mask) {
    const Matrix& Lg = logits.value();
    if (targets.size() != Lg.rows || mask.size() != Lg.rows) {
        throw ValidationError("masked_next_token_ce: logits " + Lg.shape_str() + " vs " +
                              std::to_string(targets.size()) + " targets / " +
                              std::to_string(mask.size()) + " mask entries");
    }
    const std::size_t V = Lg.cols;
    std::vector<std::size_t> positions;
    double total = 0.0;
    Matrix probs;  // softmax rows for the contributing positions
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p]) continue;
        if (p == 0) throw ValidationError("masked_next_token_ce: position 0 cannot be supervised");
        const int t = targets[p];
        if (t < 0 || static_cast<std::size_t>(t) >= V) {
            throw ValidationError("masked_next_token_ce: target " + std::to_string(t) +
                                  " outside vocabulary of " + std::to_string(V));
        }
        positions.push_back(p);
    }
    probs = Matrix(positions.size(), V);
    for (std::size_t k = 0; k < positions.size(); ++k) {
        const auto row = Lg.row_span(positions[k] - 1);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            probs(k, j) = std::exp(row[j] - mx);
            z += probs(k, j);
        }
        for (std::size_t j = 0; j < V; ++j) probs(k, j) /= z;
        total += (std::log(z) + mx) - row[targets[positions[k]]];
    }
    auto ln = logits.node();
    std::vector<int> tg(targets.begin(), targets.end());
    Var out = make_result(Matrix(1, 1, total), {ln},
                          [ln, positions, tg, probs = std::move(probs), V](Node& self) {
        Matrix& g = ln->ensure_grad();
        const double gs = self.grad.data[0];
        for (std::size_t k = 0; k < positions.size(); ++k) {
            const std::size_t r = positions[k] - 1;
            for (std::size_t j = 0; j < V; ++j) g(r, j) += gs * probs(k, j);
            g(r, static_cast<std::size_t>(tg[positions[k]])) -= gs;
        }
    });
    return {out, positions.size()};
}

}  // namespace forenx::ag
