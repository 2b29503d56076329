#pragma once

// Shared helpers and independent reference implementations (oracles) used by
// the unit and acceptance suites. Oracles here must stay independent of the
// library code paths they check: plain scalar loops, no reuse of the
// library's linear algebra beyond element access.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ctxlm/context.hpp"
#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/tensor.hpp"

namespace testutil {

inline ctxlm::Tensor<double> rand_tensor(std::mt19937_64& rng, std::vector<std::size_t> shape,
                                         double scale = 1.0) {
    ctxlm::Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> u(-scale, scale);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

inline double max_abs_diff(const ctxlm::Tensor<double>& a, const ctxlm::Tensor<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Relative gradient error as specified for the finite-difference checks:
// max over elements of |analytic - fd| / (|fd| + 1e-8).
inline double grad_rel_err(const ctxlm::Tensor<double>& analytic,
                           const ctxlm::Tensor<double>& fd) {
    double m = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        m = std::max(m, std::abs(analytic[i] - fd[i]) / (std::abs(fd[i]) + 1e-8));
    return m;
}

// ---------------------------------------------------------------------------
// Oracles

inline ctxlm::Tensor<double> oracle_matmul(const ctxlm::Tensor<double>& a,
                                           const ctxlm::Tensor<double>& b) {
    ctxlm::Tensor<double> out({a.extent(0), b.extent(1)});
    for (std::size_t i = 0; i < a.extent(0); ++i)
        for (std::size_t j = 0; j < b.extent(1); ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < a.extent(1); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    return out;
}

inline ctxlm::Tensor<double> oracle_mode1(const ctxlm::Tensor<double>& c,
                                          const ctxlm::Tensor<double>& t) {
    ctxlm::Tensor<double> out({t.extent(1), t.extent(2)});
    for (std::size_t p = 0; p < t.extent(1); ++p)
        for (std::size_t r = 0; r < t.extent(2); ++r) {
            double acc = 0;
            for (std::size_t k = 0; k < t.extent(0); ++k) acc += c[k] * t(k, p, r);
            out(p, r) = acc;
        }
    return out;
}

inline ctxlm::Tensor<double> oracle_mode3(const ctxlm::Tensor<double>& t,
                                          const ctxlm::Tensor<double>& c) {
    ctxlm::Tensor<double> out({t.extent(0), t.extent(1)});
    for (std::size_t r = 0; r < t.extent(0); ++r)
        for (std::size_t q = 0; q < t.extent(1); ++q) {
            double acc = 0;
            for (std::size_t k = 0; k < t.extent(2); ++k) acc += t(r, q, k) * c[k];
            out(r, q) = acc;
        }
    return out;
}

// Brute-force expansion of the bilinear adaptation: the transpose of
// sum_{k1,k2} c[k1] c[k2] Z_L[k1] Z_R[:,:,k2].
inline ctxlm::Tensor<double> oracle_adaptation(const ctxlm::Tensor<double>& c,
                                               const ctxlm::Tensor<double>& zl,
                                               const ctxlm::Tensor<double>& zr) {
    const std::size_t K = zl.extent(0), P = zl.extent(1), R = zl.extent(2), Q = zr.extent(1);
    ctxlm::Tensor<double> a({Q, P});
    for (std::size_t k1 = 0; k1 < K; ++k1)
        for (std::size_t k2 = 0; k2 < K; ++k2) {
            const double w = c[k1] * c[k2];
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t q = 0; q < Q; ++q) {
                    double acc = 0;
                    for (std::size_t r = 0; r < R; ++r) acc += zl(k1, p, r) * zr(r, q, k2);
                    a(q, p) += w * acc;
                }
        }
    return a;
}

// Scalar reference for one coupled-gate LSTM step.
struct RefState {
    std::vector<double> h, m;
};

inline double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline RefState oracle_lstm_step(const ctxlm::Tensor<double>& w, const ctxlm::Tensor<double>& b,
                                 const std::vector<double>& x, const RefState& s) {
    const std::size_t gd = w.extent(0), in = w.extent(1);
    const std::size_t d = gd / 3, e = in - d;
    std::vector<double> pre(gd, 0.0);
    for (std::size_t i = 0; i < gd; ++i) {
        for (std::size_t j = 0; j < e; ++j) pre[i] += w(i, j) * x[j];
        for (std::size_t j = 0; j < d; ++j) pre[i] += w(i, e + j) * s.h[j];
        pre[i] += b[i];
    }
    RefState out{std::vector<double>(d), std::vector<double>(d)};
    for (std::size_t i = 0; i < d; ++i) {
        const double f = ref_sigmoid(pre[d + i] + 1.0);
        const double g = std::tanh(pre[i]);
        out.m[i] = s.m[i] * f + (1.0 - f) * g;
        out.h[i] = std::tanh(out.m[i]) * ref_sigmoid(pre[2 * d + i]);
    }
    return out;
}

// Singular values by one-sided Jacobi (columns of A orthogonalized in
// place); accurate for the tiny matrices the rank checks use, and does not
// square the condition number the way an A^T A eigensolve would.
inline std::vector<double> singular_values(const ctxlm::Tensor<double>& a_in) {
    ctxlm::Tensor<double> a = a_in;
    if (a.extent(0) < a.extent(1)) a = ctxlm::transpose(a);
    const std::size_t m = a.extent(0), n = a.extent(1);
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                if (gamma == 0) continue;
                off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta + 1e-300));
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cth = 1.0 / std::sqrt(1.0 + t * t), sth = cth * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    a(i, p) = cth * ap - sth * aq;
                    a(i, q) = sth * ap + cth * aq;
                }
            }
        if (off < 1e-15) break;
    }
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
        sv[j] = std::sqrt(s);
    }
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

inline double spectral_norm(const ctxlm::Tensor<double>& a) { return singular_values(a)[0]; }

// ---------------------------------------------------------------------------
// Small-model fixtures

struct TestModel {
    ctxlm::ModelConfig cfg;
    ctxlm::ContextSchema schema;
    ctxlm::ModelParams<double> params;
};

inline ctxlm::ContextSchema small_schema(bool with_numeric = false) {
    ctxlm::ContextSchema schema;
    ctxlm::ContextVar group;
    group.name = "group";
    group.kind = ctxlm::VarKind::Categorical;
    group.categories = {"a", "b"};
    group.cardinality = 3;
    schema.variables = {group};
    if (with_numeric) {
        ctxlm::ContextVar score;
        score.name = "score";
        score.kind = ctxlm::VarKind::Numeric;
        score.mean = 1.0;
        score.stddev = 2.0;
        schema.variables.push_back(score);
    }
    return schema;
}

inline TestModel make_model(ctxlm::Variant variant, ctxlm::BiasMode bias_mode, std::size_t vocab,
                            std::size_t e, std::size_t d, std::size_t k, std::size_t r,
                            std::uint64_t seed, bool with_numeric = false) {
    TestModel m;
    m.schema = small_schema(with_numeric);
    m.cfg.variant = variant;
    m.cfg.bias_mode = bias_mode;
    m.cfg.vocab_size = vocab;
    m.cfg.embedding_dim = e;
    m.cfg.recurrent_dim = d;
    m.cfg.context_dim = k;
    m.cfg.rank = variant == ctxlm::Variant::FactorCell ? r : 0;
    m.cfg.unit = ctxlm::Unit::Character;
    std::mt19937_64 rng(seed);
    m.params = ctxlm::init_params<double>(m.cfg, m.schema, rng);
    return m;
}

inline ctxlm::ContextValue ctx_cat(std::size_t index) {
    return ctxlm::ContextValue{{ctxlm::ContextSlot::category(index)}};
}

}  // namespace testutil
