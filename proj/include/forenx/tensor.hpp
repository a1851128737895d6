#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace forenx {

/// Thrown when the caller hands in data that violates an operation's contract.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a remote backend could not be reached; callers may retry.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles. Vectors are stored as 1 x n.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values);

    static Matrix row(std::span<const double> values);
    static Matrix identity(std::size_t n);

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row_span(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row_span(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_str() const;

    bool all_finite() const;
    void fill(double v);
};

std::string shape_str(std::size_t rows, std::size_t cols);

/// Draws i.i.d. normal entries with the given standard deviation.
Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

/// Kaiming-uniform style init used for adapter A matrices: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Matrix random_uniform(std::size_t rows, std::size_t cols, double bound, std::mt19937_64& rng);

}  // namespace forenx
