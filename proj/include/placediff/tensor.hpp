#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace placediff {

// Dense row-major array of 64-bit floats. Most operations treat it as a
// matrix: rows() collapses all leading extents, cols() is the last extent.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;

    Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    static Tensor matrix(int r, int c, double fill = 0.0) {
        return Tensor({r, c}, fill);
    }

    static Tensor scalar(double v) {
        Tensor t({1, 1});
        t.data[0] = v;
        return t;
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        if (s.empty()) throw std::invalid_argument("tensor: empty shape");
        std::size_t n = 1;
        for (int e : s) {
            if (e <= 0) throw std::invalid_argument("tensor: non-positive extent");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }

    int rows() const {
        std::size_t r = 1;
        for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= static_cast<std::size_t>(shape[i]);
        return static_cast<int>(r);
    }

    int cols() const { return shape.back(); }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void check_finite(const char* who) const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                throw std::runtime_error(std::string("non-finite value produced by ") + who);
            }
        }
    }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

// ---- raw (tape-free) matrix kernels ----

// c += a * b
inline void mm_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    for (int i = 0; i < m; ++i) {
        const double* ai = a.data.data() + static_cast<std::size_t>(i) * k;
        double* ci = c.data.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.data.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c += a * b^T
inline void mm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    for (int i = 0; i < m; ++i) {
        const double* ai = a.data.data() + static_cast<std::size_t>(i) * k;
        double* ci = c.data.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b.data.data() + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c += a^T * b
inline void mm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    const int k = a.rows(), m = a.cols(), n = b.cols();
    for (int p = 0; p < k; ++p) {
        const double* ap = a.data.data() + static_cast<std::size_t>(p) * m;
        const double* bp = b.data.data() + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c.data.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

inline Tensor mm(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner extents " + shape_str(a) + " vs " + shape_str(b));
    }
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    mm_acc(a, b, c);
    return c;
}

}  // namespace placediff
