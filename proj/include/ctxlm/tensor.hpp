#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "ctxlm/errors.hpp"

namespace ctxlm {

// Dense rank-1/2/3 array of floats, row-major flat storage. Every array in
// the model (embeddings, gate weights, the adaptation basis tensors) fits in
// rank <= 3, so there is no general N-d machinery. Scalar is float or
// double; gradient checks require double.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        if (shape_.size() < 1 || shape_.size() > 3)
            throw DimensionError("Tensor: rank must be 1, 2 or 3, got rank " +
                                 std::to_string(shape_.size()));
        std::size_t n = 1;
        for (std::size_t e : shape_) n *= e;
        data_.assign(n, S(0));
    }

    Tensor(std::initializer_list<std::size_t> shape)
        : Tensor(std::vector<std::size_t>(shape)) {}

    static Tensor vector(std::size_t n) { return Tensor({n}); }
    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    bool empty() const { return data_.empty(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t i) const { return shape_[i]; }
    const std::vector<std::size_t>& shape() const { return shape_; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    S operator[](std::size_t i) const { return data_[i]; }

    S& operator()(std::size_t i) { return data_[i]; }
    S operator()(std::size_t i) const { return data_[i]; }
    S& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    S operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    S& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    S operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    void fill(S v) { data_.assign(data_.size(), v); }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << (i ? "x" : "") << shape_[i];
        os << ")";
        return os.str();
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape_ = shape_;
        out.data_.resize(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i)
            out.data_[i] = static_cast<T>(data_[i]);
        return out;
    }

    template <typename T>
    friend class Tensor;

private:
    std::vector<std::size_t> shape_;
    std::vector<S> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}
}  // namespace detail

// Standard matrix product, blocked triple loop (ikj order; the inner j loop
// streams contiguously through b and out).
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0),
                    "matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
    const std::size_t m = a.extent(0), kk = a.extent(1), n = b.extent(1);
    Tensor<S> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a.data() + i * kk;
        S* orow = out.data() + i * n;
        for (std::size_t k = 0; k < kk; ++k) {
            const S aik = arow[k];
            if (aik == S(0)) continue;
            const S* brow = b.data() + k * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

// y = A x
template <typename S>
Tensor<S> matvec(const Tensor<S>& a, const Tensor<S>& x) {
    detail::require(a.rank() == 2 && x.rank() == 1 && a.extent(1) == x.extent(0),
                    "matvec: incompatible shapes " + a.shape_str() + " x " + x.shape_str());
    const std::size_t m = a.extent(0), n = a.extent(1);
    Tensor<S> y({m});
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = a.data() + i * n;
        S acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    return y;
}

// y = A^T x  (A is m x n, x is m, y is n); avoids materializing transposes
// in the backward passes.
template <typename S>
Tensor<S> matvec_t(const Tensor<S>& a, const Tensor<S>& x) {
    detail::require(a.rank() == 2 && x.rank() == 1 && a.extent(0) == x.extent(0),
                    "matvec_t: incompatible shapes " + a.shape_str() + "^T x " + x.shape_str());
    const std::size_t m = a.extent(0), n = a.extent(1);
    Tensor<S> y({n});
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = a.data() + i * n;
        const S xi = x[i];
        for (std::size_t j = 0; j < n; ++j) y[j] += row[j] * xi;
    }
    return y;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    detail::require(a.rank() == 2, "transpose: rank-2 expected, got " + a.shape_str());
    const std::size_t m = a.extent(0), n = a.extent(1);
    Tensor<S> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

// Contraction of c against the first mode of t: out[p,r] = sum_k c[k] t[k,p,r].
template <typename S>
Tensor<S> mode1_product(const Tensor<S>& c, const Tensor<S>& t) {
    detail::require(c.rank() == 1 && t.rank() == 3 && c.extent(0) == t.extent(0),
                    "mode1_product: incompatible shapes " + c.shape_str() + " x " + t.shape_str());
    const std::size_t K = t.extent(0), P = t.extent(1), R = t.extent(2);
    Tensor<S> out({P, R});
    for (std::size_t k = 0; k < K; ++k) {
        const S ck = c[k];
        if (ck == S(0)) continue;
        const S* slab = t.data() + k * P * R;
        S* o = out.data();
        for (std::size_t i = 0; i < P * R; ++i) o[i] += ck * slab[i];
    }
    return out;
}

// Contraction of c against the last mode of t: out[r,q] = sum_k t[r,q,k] c[k].
template <typename S>
Tensor<S> mode3_product(const Tensor<S>& t, const Tensor<S>& c) {
    detail::require(t.rank() == 3 && c.rank() == 1 && t.extent(2) == c.extent(0),
                    "mode3_product: incompatible shapes " + t.shape_str() + " x " + c.shape_str());
    const std::size_t R = t.extent(0), Q = t.extent(1), K = t.extent(2);
    Tensor<S> out({R, Q});
    const S* src = t.data();
    S* o = out.data();
    for (std::size_t i = 0; i < R * Q; ++i) {
        S acc = 0;
        const S* fib = src + i * K;
        for (std::size_t k = 0; k < K; ++k) acc += fib[k] * c[k];
        o[i] = acc;
    }
    return out;
}

// out += s * a
template <typename S>
void add_scaled(Tensor<S>& out, const Tensor<S>& a, S s = S(1)) {
    detail::require(out.shape() == a.shape(),
                    "add_scaled: shape mismatch " + out.shape_str() + " vs " + a.shape_str());
    S* o = out.data();
    const S* p = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] += s * p[i];
}

// out += s * x y^T
template <typename S>
void add_outer(Tensor<S>& out, const Tensor<S>& x, const Tensor<S>& y, S s = S(1)) {
    detail::require(out.rank() == 2 && x.rank() == 1 && y.rank() == 1 &&
                        out.extent(0) == x.extent(0) && out.extent(1) == y.extent(0),
                    "add_outer: shape mismatch " + out.shape_str() + " vs " + x.shape_str() +
                        " outer " + y.shape_str());
    const std::size_t m = x.extent(0), n = y.extent(0);
    for (std::size_t i = 0; i < m; ++i) {
        S* row = out.data() + i * n;
        const S xi = s * x[i];
        if (xi == S(0)) continue;
        for (std::size_t j = 0; j < n; ++j) row[j] += xi * y[j];
    }
}

// Central-difference gradient of a scalar function, the test oracle backing
// every analytic gradient in the repository.
template <typename S>
Tensor<S> finite_diff_grad(const std::function<S(const Tensor<S>&)>& f, const Tensor<S>& x,
                           S eps) {
    Tensor<S> g(x.shape());
    Tensor<S> xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const S orig = xp[i];
        xp[i] = orig + eps;
        const S fp = f(xp);
        xp[i] = orig - eps;
        const S fm = f(xp);
        xp[i] = orig;
        if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
            throw NumericError("finite_diff_grad: non-finite evaluation at element " +
                               std::to_string(i));
        g[i] = (fp - fm) / (S(2) * eps);
    }
    return g;
}

}  // namespace ctxlm
