#pragma once

// Independent reference math for the suites. Nothing here calls into the library's
// autograd; it works on plain vectors read out of the model's parameters.

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "forenx/dataset.hpp"
#include "forenx/model.hpp"

#define CHECK_NEAR(a, b, tol) CHECK_LE(std::abs((a) - (b)), (tol))
#define REQUIRE_NEAR(a, b, tol) REQUIRE_LE(std::abs((a) - (b)), (tol))

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat from(const forenx::Matrix& m) {
    Mat out(m.rows, std::vector<double>(m.cols));
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[r][c] = m(r, c);
    return out;
}

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

/// x [n x in], w [out x in], b [1 x out] or empty -> x w^T + b
inline Mat affine(const Mat& x, const Mat& w, const Mat& b) {
    Mat y = zeros(x.size(), w.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t o = 0; o < w.size(); ++o) {
            double s = b.empty() ? 0.0 : b[0][o];
            for (std::size_t k = 0; k < w[o].size(); ++k) s += x[i][k] * w[o][k];
            y[i][o] = s;
        }
    return y;
}

inline double gelu(double x) {
    const double c = std::sqrt(2.0 / M_PI);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline Mat gelu(Mat x) {
    for (auto& r : x)
        for (double& v : r) v = gelu(v);
    return x;
}

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
    Mat y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double n = static_cast<double>(x[i].size());
        double mu = 0.0;
        for (double v : x[i]) mu += v;
        mu /= n;
        double var = 0.0;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= n;
        for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g[0][j] + b[0][j];
    }
    return y;
}

inline Mat add(Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    return a;
}

/// Named parameter lookup.
struct Params {
    std::map<std::string, Mat> p;
    explicit Params(const forenx::ForenxModel& m) {
        for (const auto& np : m.parameters()) p[np.name] = from(np.var.value());
    }
    const Mat& operator[](const std::string& n) const { return p.at(n); }
};

inline Mat block(const Params& P, const std::string& pre, const Mat& x, std::size_t heads, bool causal) {
    const Mat h = layer_norm(x, P[pre + ".ln1.gamma"], P[pre + ".ln1.beta"]);
    const Mat q = affine(h, P[pre + ".q_proj.weight"], P[pre + ".q_proj.bias"]);
    const Mat k = affine(h, P[pre + ".k_proj.weight"], P[pre + ".k_proj.bias"]);
    const Mat v = affine(h, P[pre + ".v_proj.weight"], P[pre + ".v_proj.bias"]);
    const std::size_t n = x.size(), w = x[0].size(), dh = w / heads;
    Mat attn = zeros(n, w);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> s(n, -INFINITY);
            double mx = -INFINITY;
            for (std::size_t j = 0; j < n; ++j) {
                if (causal && j > i) continue;
                double d = 0.0;
                for (std::size_t c = 0; c < dh; ++c) d += q[i][hd * dh + c] * k[j][hd * dh + c];
                s[j] = d / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                s[j] = (causal && j > i) ? 0.0 : std::exp(s[j] - mx);
                z += s[j];
            }
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < dh; ++c) attn[i][hd * dh + c] += s[j] / z * v[j][hd * dh + c];
        }
    }
    const Mat x1 = add(x, affine(attn, P[pre + ".o_proj.weight"], P[pre + ".o_proj.bias"]));
    const Mat m = affine(gelu(affine(layer_norm(x1, P[pre + ".ln2.gamma"], P[pre + ".ln2.beta"]),
                                     P[pre + ".fc1.weight"], P[pre + ".fc1.bias"])),
                         P[pre + ".fc2.weight"], P[pre + ".fc2.bias"]);
    return add(x1, m);
}

struct VisionOut {
    Mat tokens;
    Mat pooled;
};

/// Straight-line vision encoder over an image given in CHW order.
inline VisionOut vision(const forenx::ForenxModel& model, const forenx::Image& img) {
    const auto& cfg = model.config();
    const Params P(model);
    const std::size_t p = cfg.patch_size, grid = cfg.image_size / p;
    Mat patches;
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            std::vector<double> row;
            for (std::size_t c = 0; c < cfg.channels; ++c)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x) row.push_back(img.at(c, gy * p + y, gx * p + x));
            patches.push_back(row);
        }
    Mat x = P["vision.class_token"];
    for (const auto& r : affine(patches, P["vision.patch_embed.weight"], P["vision.patch_embed.bias"])) x.push_back(r);
    x = add(x, P["vision.pos_embed"]);
    x = layer_norm(x, P["vision.ln_pre.gamma"], P["vision.ln_pre.beta"]);
    for (std::size_t i = 0; i < cfg.vision_layers; ++i)
        x = block(P, "vision.blocks." + std::to_string(i), x, cfg.vision_heads, false);
    VisionOut out;
    out.tokens = x;
    out.pooled = layer_norm(Mat{x[0]}, P["vision.ln_post.gamma"], P["vision.ln_post.beta"]);
    return out;
}

inline double max_abs_diff(const Mat& a, const forenx::Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b(i, j)));
    return m;
}

}  // namespace oracle

namespace gen {

/// Small deterministic generators for property tests.
inline forenx::Matrix matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    forenx::Matrix m(r, c);
    for (double& v : m.data) v = n(rng);
    return m;
}

inline forenx::Image image(std::mt19937_64& rng, std::size_t size = 32) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    forenx::Image img = forenx::Image::zeros(3, size, size);
    for (double& v : img.pixels) v = u(rng);
    return img;
}

inline std::string word(std::mt19937_64& rng, std::size_t min_len = 1, std::size_t max_len = 8) {
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<int> ch('a', 'z');
    std::string s(len(rng), 'a');
    for (char& c : s) c = static_cast<char>(ch(rng));
    return s;
}

inline std::string sentence(std::mt19937_64& rng, std::size_t words) {
    std::string s;
    for (std::size_t i = 0; i < words; ++i) s += (i ? " " : "") + word(rng);
    return s;
}

}  // namespace gen

/// Scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("forenx_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

/// Overwrites every parameter with N(0, scale) so oracle comparisons do not run against
/// near-zero initial weights. Layer-norm gains are kept near 1.
inline void perturb(const forenx::ForenxModel& model, std::uint64_t seed, double scale = 0.3) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (const auto& np : model.parameters()) {
        const bool gain = np.name.size() > 6 && np.name.compare(np.name.size() - 6, 6, ".gamma") == 0;
        for (double& v : np.var.node()->value.data) v = (gain ? 1.0 : 0.0) + n(rng);
    }
}

/// Synthetic images with v1 detection questions and answers attached.
struct ToyData {
    std::vector<forenx::SyntheticImage> images;
    std::vector<forenx::Example> examples;

    ToyData(std::uint64_t seed, std::size_t n, forenx::ArtifactKind kind, const std::string& split = "train")
        : images(forenx::gen_synthetic_dataset(seed, n, kind, split)) {
        const auto& prompt = forenx::detection_prompt("v1");
        for (const auto& si : images) {
            const auto qa = forenx::gen_detection_qa(si.sample.label, "v1");
            examples.push_back({&si.image, std::string(prompt.system), qa.question, qa.answer,
                                forenx::label_value(si.sample.label)});
        }
    }
    ToyData(const ToyData&) = delete;
};

/// In-memory dataset (records plus decoded images) from synthetic images of several kinds.
inline forenx::LoadedDataset loaded_dataset(std::uint64_t seed, std::size_t n_per_kind,
                                            std::initializer_list<forenx::ArtifactKind> kinds,
                                            const std::string& split = "test") {
    forenx::LoadedDataset d;
    forenx::MockCaptioner cap;
    std::mt19937_64 rng(seed);
    for (forenx::ArtifactKind k : kinds) {
        for (auto& s : forenx::gen_synthetic_dataset(seed, n_per_kind, k, split)) {
            d.records.push_back(forenx::make_record(s.sample, s.image, cap, "v1", rng));
            d.images.push_back(std::make_unique<forenx::Image>(std::move(s.image)));
        }
    }
    return d;
}
