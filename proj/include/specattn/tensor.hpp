#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace specattn {

// Every recoverable failure in the library surfaces as this exception type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Vector = std::vector<double>;

// Non-owning row-major view, used to hand cache storage to the kernels without copying.
struct MatrixView {
    const double* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::span<const double> row(std::size_t r) const { return {data + r * cols, cols}; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Dense row-major matrix of doubles. A row vector is a 1 x n Tensor2D.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw Error("tensor data length " + std::to_string(data_.size()) + " != " +
                        std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static Tensor2D row_vector(std::span<const double> values) {
        return Tensor2D(1, values.size(), std::vector<double>(values.begin(), values.end()));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    MatrixView view() const { return {data_.data(), rows_, cols_}; }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double l2_norm(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

// y = x * W for a row vector x (len W.rows) and W (rows x cols).
inline void vec_mat(std::span<const double> x, const Tensor2D& w, std::span<double> y) {
    if (x.size() != w.rows() || y.size() != w.cols()) {
        throw Error("vec_mat shape mismatch");
    }
    for (std::size_t c = 0; c < y.size(); ++c) y[c] = 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) {
        const double xr = x[r];
        const auto wr = w.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) y[c] += xr * wr[c];
    }
}

}  // namespace specattn
