#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "facl/error.hpp"

namespace facl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

/// Dense row-major array of doubles. An empty shape denotes a scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_product(shape_) != values_.size()) {
            throw ShapeError("tensor shape " + shape_string(shape_) + " does not hold " +
                             std::to_string(values_.size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor(Shape{rows, cols}, fill);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> v;
        v.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged matrix literal");
            v.insert(v.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(v));
    }

    static Tensor vector(std::initializer_list<double> v) {
        return Tensor(Shape{v.size()}, std::vector<double>(v));
    }

    static Tensor identity(std::size_t n) {
        Tensor t = matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    std::size_t rows() const {
        require_matrix();
        return shape_[0];
    }
    std::size_t cols() const {
        require_matrix();
        return shape_[1];
    }

    double& operator[](std::size_t k) { return values_[k]; }
    double operator[](std::size_t k) const { return values_[k]; }

    double& operator()(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }

    std::span<double> row(std::size_t i) { return {values_.data() + i * shape_[1], shape_[1]}; }
    std::span<const double> row(std::size_t i) const { return {values_.data() + i * shape_[1], shape_[1]}; }

    std::span<double> data() noexcept { return values_; }
    std::span<const double> data() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    double item() const {
        if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return values_[0];
    }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    void require_matrix() const {
        if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

inline void require_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
}

// Plain (untaped) kernels. The differentiable ops in autodiff.hpp call these,
// so a taped and an untaped evaluation of the same expression agree bit for bit.
namespace kernels {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = Tensor::matrix(m, n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a);

// a * b^T. Transposing b first keeps the inner loop contiguous.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: cannot multiply " + shape_string(a.shape()) + " by transpose of " +
                         shape_string(b.shape()));
    }
    return matmul(a, transpose(b));
}

// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: cannot multiply transpose of " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor c = Tensor::matrix(m, n);
    for (std::size_t p = 0; p < k; ++p) {
        const auto ar = a.row(p);
        const auto br = b.row(p);
        for (std::size_t i = 0; i < m; ++i) {
            const double aip = ar[i];
            if (aip == 0.0) continue;
            double* crow = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * br[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor t = Tensor::matrix(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
    const std::size_t cols = a.cols();
    Tensor out = Tensor::matrix(idx.size(), cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows()) throw ShapeError("gather_rows: row index out of range");
        std::copy_n(a.row(idx[r]).begin(), cols, out.row(r).begin());
    }
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw ShapeError("concat_rows: width mismatch");
    Tensor out = Tensor::matrix(a.rows() + b.rows(), a.cols());
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

}  // namespace kernels
}  // namespace facl
