#pragma once

// Dense row-major tensors of 64-bit floats plus the raw kernels shared by
// the tape ops and the no-grad evaluation paths. Keeping one kernel per
// contraction guarantees bit-identical arithmetic between the two paths.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgetlab {

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public TensorError {
public:
    using TensorError::TensorError;
};

class NumericError : public TensorError {
public:
    using TensorError::TensorError;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad; // empty, or values.size() once engaged

    Tensor() = default;

    Tensor(Shape s, std::vector<double> v, bool rg = false)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
        if (shape_size(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }

    static Tensor zeros(Shape s, bool rg = false) {
        std::size_t n = shape_size(s);
        return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t size() const { return values.size(); }
    bool is_scalar() const { return values.size() == 1; }

    std::size_t rows() const {
        if (shape.size() != 2) throw ShapeError("rows(): tensor is not 2-d, shape " + shape_str(shape));
        return shape[0];
    }
    std::size_t cols() const {
        if (shape.size() != 2) throw ShapeError("cols(): tensor is not 2-d, shape " + shape_str(shape));
        return shape[1];
    }

    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ---- kernels -------------------------------------------------------------
// All kernels accumulate into the destination; callers zero it first.

// c[n,m] += a[n,k] @ b[k,m]
inline void k_matmul(const double* a, const double* b, double* c,
                     std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[n,m] += a[n,k] @ b[m,k]^T
inline void k_matmul_nt(const double* a, const double* b, double* c,
                        std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k,m] += a[n,k]^T @ b[n,m]
inline void k_matmul_tn(const double* a, const double* b, double* c,
                        std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// Stable log-sum-exp of a contiguous row.
inline double k_logsumexp(const double* x, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

// Column split of a 2-d tensor; inverse of column concatenation.
inline std::vector<Tensor> split_cols(const Tensor& t, const std::vector<std::size_t>& widths) {
    std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    if (total != t.cols())
        throw ShapeError("split_cols: widths sum " + std::to_string(total) +
                         " != cols " + std::to_string(t.cols()));
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (std::size_t w : widths) {
        Tensor part = Tensor::zeros({t.rows(), w});
        for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t c = 0; c < w; ++c)
                part.values[r * w + c] = t.values[r * t.cols() + off + c];
        out.push_back(std::move(part));
        off += w;
    }
    return out;
}

} // namespace forgetlab
