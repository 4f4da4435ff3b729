#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "relufair/error.hpp"

namespace relufair {

// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 of length n is
// read as a 1 x n row, rank 2 is a matrix. Arithmetic in the autodiff layer is
// matrix-only, so rows()/cols() are the working view.
class Tensor {
public:
    Tensor() : shape_{0, 0} {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_.size() > 2) throw ShapeError("Tensor: rank > 2 is not supported");
        const std::size_t expected =
            std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
        if (expected != values_.size()) {
            std::ostringstream msg;
            msg << "Tensor: shape product " << expected << " != value count " << values_.size();
            throw ShapeError(msg.str());
        }
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
    }
    static Tensor filled(std::size_t rows, std::size_t cols, double value) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
    }
    static Tensor scalar(double value) { return Tensor({1, 1}, {value}); }
    static Tensor row(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }
    static Tensor column(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n, 1}, std::move(values));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }

    std::size_t rows() const {
        if (shape_.size() < 2) return 1;
        return shape_[0];
    }
    std::size_t cols() const {
        if (shape_.empty()) return 1;
        return shape_.back();
    }

    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    // Scalar value of a one-element tensor.
    double item() const {
        if (values_.size() != 1) throw ShapeError("Tensor::item on a tensor with more than one element");
        return values_[0];
    }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    std::vector<double> to_vector() const { return values_; }

    bool same_shape(const Tensor& other) const {
        return rows() == other.rows() && cols() == other.cols();
    }

    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_string() const {
        std::ostringstream out;
        out << rows() << "x" << cols();
        return out.str();
    }

    // Copy of the listed rows.
    Tensor select_rows(std::span<const std::size_t> indices) const {
        const std::size_t c = cols();
        std::vector<double> out;
        out.reserve(indices.size() * c);
        for (std::size_t r : indices) {
            if (r >= rows()) throw ShapeError("Tensor::select_rows: index out of range");
            out.insert(out.end(), values_.begin() + static_cast<std::ptrdiff_t>(r * c),
                       values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
        }
        return Tensor({indices.size(), c}, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() && a.values_ == b.values_;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
};

namespace kernel {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
    const std::size_t n = a.rows();
    const std::size_t k = a.cols();
    const std::size_t m = b.cols();
    Tensor out = Tensor::zeros(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* out_row = &out(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double lhs = a(i, p);
            if (lhs == 0.0) continue;
            const double* rhs_row = &b.values()[p * m];
            for (std::size_t j = 0; j < m; ++j) out_row[j] += lhs * rhs_row[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out = Tensor::zeros(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename F>
Tensor map(const Tensor& a, F&& f) {
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

// Elementwise binary op with matrix/row/column/scalar broadcasting of `b`.
template <typename F>
Tensor broadcast(const Tensor& a, const Tensor& b, F&& f, const char* op) {
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    const bool row_ok = b.rows() == r || b.rows() == 1;
    const bool col_ok = b.cols() == c || b.cols() == 1;
    if (!row_ok || !col_ok)
        throw ShapeError(std::string(op) + ": cannot broadcast " + b.shape_string() + " onto " +
                         a.shape_string());
    const std::size_t row_stride = b.rows() == 1 ? 0 : b.cols();
    const std::size_t col_stride = b.cols() == 1 ? 0 : 1;
    Tensor out = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out(i, j) = f(a(i, j), b.values()[i * row_stride + j * col_stride]);
    return out;
}

// Sum `a` down to the shape (rows, cols), where each target dim is 1 or matches.
inline Tensor reduce_to(const Tensor& a, std::size_t rows, std::size_t cols) {
    if ((rows != 1 && rows != a.rows()) || (cols != 1 && cols != a.cols()))
        throw ShapeError("reduce_to: cannot reduce " + a.shape_string());
    Tensor out = Tensor::zeros(rows, cols);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            out(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += a(i, j);
    return out;
}

inline Tensor expand(const Tensor& a, std::size_t rows, std::size_t cols) {
    return broadcast(Tensor::zeros(rows, cols), a, [](double, double y) { return y; }, "expand");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

} // namespace kernel

} // namespace relufair
