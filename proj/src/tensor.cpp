#include "forenx/tensor.hpp"

#include <cmath>

namespace forenx {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
        throw ValidationError("matrix data has " + std::to_string(data.size()) +
                              " entries, expected " + forenx::shape_str(r, c));
    }
}

Matrix Matrix::row(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

std::string shape_str(std::size_t rows, std::size_t cols) {
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
}

std::string Matrix::shape_str() const { return forenx::shape_str(rows, cols); }

bool Matrix::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Matrix::fill(double v) { std::fill(data.begin(), data.end(), v); }

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

Matrix random_uniform(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

}  // namespace forenx
