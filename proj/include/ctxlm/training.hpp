#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ctxlm/checkpoint.hpp"
#include "ctxlm/data.hpp"
#include "ctxlm/eval.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/rng.hpp"

namespace ctxlm {

struct TrainConfig {
    double learning_rate = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 16;
    std::size_t max_steps = 1000;
    double keep_prob = 1.0;          // recurrent dropout keep-probability
    bool dropout_per_step = false;   // per-sequence masks by default
    std::size_t softmax_samples = 0; // 0 = full softmax
    double clip_norm = 5.0;          // global-norm gradient clip; 0 disables
    std::uint64_t seed = 42;
    int precision = 64;              // 32 or 64
    std::size_t eval_interval = 200;

    void validate(std::size_t vocab_size) const {
        if (!(keep_prob > 0.0 && keep_prob <= 1.0))
            throw ConfigError("keep_prob must be in (0, 1]");
        if (softmax_samples >= vocab_size && softmax_samples != 0)
            throw ConfigError("softmax_samples must be smaller than the vocabulary");
        if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
    }
};

template <typename S>
struct OptimizerState {
    ModelParams<S> first_moment;
    ModelParams<S> second_moment;
    std::int64_t step = 0;

    static OptimizerState zeros_like(const ModelParams<S>& params) {
        OptimizerState st;
        st.first_moment = ModelParams<S>::zeros_like(params);
        st.second_moment = ModelParams<S>::zeros_like(params);
        return st;
    }
};

// Inverted dropout: Bernoulli(keep)/keep entries, one mask row per sequence.
// The mask multiplies tanh(i_t) before the memory-cell update; evaluation
// uses no mask (equivalently all ones).
template <typename S>
Tensor<S> recurrent_dropout_mask(std::mt19937_64& rng, double keep, std::size_t d,
                                 std::size_t batch) {
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("dropout keep must be in (0, 1]");
    Tensor<S> mask({batch, d});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const S inv = S(1.0 / keep);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = u(rng) < keep ? inv : S(0);
    return mask;
}

// ---------------------------------------------------------------------------
// Loss with reverse-mode gradients

template <typename S>
struct LossResult {
    S loss = 0;
    ModelParams<S> grads;
};

namespace detail {

// Sampled-softmax configuration. `forced_samples`, when set, bypasses the
// proposal draw (used by tests that need an exhaustive candidate set).
struct SampledSoftmax {
    const std::vector<double>* proposal = nullptr;
    std::vector<double> cumulative;  // prefix sums of the proposal
    std::size_t sample_count = 0;
    std::mt19937_64* rng = nullptr;
    const std::vector<int>* forced_samples = nullptr;
};

inline int sample_from_cumulative(const std::vector<double>& cum, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, cum.back());
    const double x = u(rng);
    return int(std::upper_bound(cum.begin(), cum.end(), x) - cum.begin());
}

// Per-sequence forward caches for backpropagation through time.
template <typename S>
struct SeqCache {
    // context/adaptation
    Tensor<S> raw, pre1, henc, c;  // encoder (empty when unused)
    Tensor<S> left, right;         // (e+d) x r and r x 3d factors (factor_cell)
    AdaptedCell<S> cell;
    std::size_t class_row = std::size_t(-1);
    // per step
    std::vector<Tensor<S>> z;       // (e+d) cell inputs
    std::vector<Tensor<S>> f, g, o; // gate activations: sigmoid(f+1), tanh(i), sigmoid(o)
    std::vector<Tensor<S>> m, h, tanh_m;
    std::vector<std::vector<int>> cand;  // sampled-softmax candidates per step
};

template <typename S>
SeqCache<S> build_seq_context(const ModelParams<S>& params, const ModelConfig& cfg,
                              const ContextSchema& schema, const ContextValue& value) {
    SeqCache<S> sc;
    if (cfg.uses_context_embedding()) {
        sc.raw = encode_raw<S>(schema, value);
        sc.pre1 = matvec(params.encoder.w1, sc.raw);
        if (!params.encoder.b1.empty()) add_scaled(sc.pre1, params.encoder.b1);
        sc.henc = sc.pre1;
        for (std::size_t i = 0; i < sc.henc.size(); ++i)
            if (sc.henc[i] < S(0)) sc.henc[i] = S(0);
        sc.c = matvec(params.encoder.w2, sc.henc);
        if (!params.encoder.b2.empty()) add_scaled(sc.c, params.encoder.b2);
    }
    sc.cell.c = sc.c;
    sc.cell.w = params.w;
    if (cfg.has_factor()) {
        sc.left = mode1_product(sc.c, params.z_left);
        sc.right = mode3_product(params.z_right, sc.c);
        Tensor<S> a = transpose(matmul(sc.left, sc.right));
        add_scaled(sc.cell.w, a);
    }
    sc.cell.b = params.b;
    if (cfg.has_recurrent_bias()) {
        Tensor<S> vb = matvec(params.v_bias, sc.c);
        add_scaled(sc.cell.b, vb);
    }
    if (cfg.has_softmax_offset()) {
        if (cfg.bias_mode == BiasMode::Projected) {
            sc.cell.offset = matvec(params.q, sc.c);
        } else {
            sc.class_row = joint_class_index(schema, value);
            sc.cell.offset = Tensor<S>({cfg.vocab_size});
            for (std::size_t j = 0; j < cfg.vocab_size; ++j)
                sc.cell.offset[j] = params.class_bias(sc.class_row, j);
        }
    }
    return sc;
}

// Forward + backward for one sequence; gradients accumulate into `grads`
// scaled by `weight` (1 / batch token count). Returns the summed negative
// log likelihood over the sequence's predicted positions.
template <typename S>
S seq_forward_backward(const ModelParams<S>& params, const ModelConfig& cfg,
                       const ContextSchema& schema, const ContextValue& value,
                       const std::vector<int>& tokens, std::size_t true_len,
                       const Tensor<S>* dropout_mask, const SampledSoftmax* sampled, S weight,
                       ModelParams<S>& grads) {
    const std::size_t d = cfg.recurrent_dim, e = cfg.embedding_dim, V = cfg.vocab_size;
    const std::size_t steps = true_len - 1;
    check_token_ids<S>(tokens, V);

    SeqCache<S> sc = build_seq_context(params, cfg, schema, value);
    const bool per_step_mask = dropout_mask && dropout_mask->rank() == 2;

    auto mask_at = [&](std::size_t t, std::size_t i) -> S {
        if (!dropout_mask) return S(1);
        return per_step_mask ? (*dropout_mask)(t, i) : (*dropout_mask)(i);
    };

    // ---- forward
    Tensor<S> h_prev({d}), m_prev({d});
    S nll = 0;
    for (std::size_t t = 0; t < steps; ++t) {
        Tensor<S> z({e + d});
        const int tok = tokens[t];
        for (std::size_t i = 0; i < e; ++i) z[i] = params.embeddings(std::size_t(tok), i);
        for (std::size_t i = 0; i < d; ++i) z[e + i] = h_prev[i];

        Tensor<S> pre = matvec(sc.cell.w, z);
        add_scaled(pre, sc.cell.b);

        Tensor<S> f({d}), g({d}), o({d}), m({d}), h({d}), tm({d});
        for (std::size_t i = 0; i < d; ++i) {
            f[i] = sigmoid(pre[d + i] + S(1));
            g[i] = std::tanh(pre[i]);
            o[i] = sigmoid(pre[2 * d + i]);
            const S gm = g[i] * mask_at(t, i);
            m[i] = m_prev[i] * f[i] + (S(1) - f[i]) * gm;
            tm[i] = std::tanh(m[i]);
            h[i] = tm[i] * o[i];
        }
        sc.z.push_back(std::move(z));
        sc.f.push_back(std::move(f));
        sc.g.push_back(std::move(g));
        sc.o.push_back(std::move(o));
        sc.m.push_back(m);
        sc.tanh_m.push_back(std::move(tm));
        sc.h.push_back(h);
        h_prev = sc.h.back();
        m_prev = sc.m.back();

        // output layer
        const int target = tokens[t + 1];
        Tensor<S> u = cfg.uses_projection() ? matvec(params.projection, h_prev) : h_prev;
        if (!sampled) {
            Tensor<S> logits = matvec(params.embeddings, u);
            add_scaled(logits, params.b_out);
            if (!sc.cell.offset.empty()) add_scaled(logits, sc.cell.offset);
            nll += log_sum_exp(logits) - logits[std::size_t(target)];
        } else {
            std::vector<int> cand;
            cand.push_back(target);
            if (sampled->forced_samples) {
                cand.insert(cand.end(), sampled->forced_samples->begin(),
                            sampled->forced_samples->end());
            } else {
                for (std::size_t s = 0; s < sampled->sample_count; ++s)
                    cand.push_back(sample_from_cumulative(sampled->cumulative, *sampled->rng));
            }
            Tensor<S> al({cand.size()});
            for (std::size_t j = 0; j < cand.size(); ++j) {
                const int id = cand[j];
                if (j > 0 && id == target) {  // accidental hit: drop from the set
                    al[j] = -std::numeric_limits<S>::infinity();
                    continue;
                }
                const double q = (*sampled->proposal)[std::size_t(id)];
                if (!(q > 0))
                    throw ConfigError("sampled softmax: candidate with zero proposal mass");
                S logit = params.b_out[std::size_t(id)];
                for (std::size_t i = 0; i < e; ++i)
                    logit += params.embeddings(std::size_t(id), i) * u[i];
                if (!sc.cell.offset.empty()) logit += sc.cell.offset[std::size_t(id)];
                al[j] = logit - S(std::log(q));
            }
            nll += log_sum_exp(al) - al[0];
            sc.cand.push_back(std::move(cand));
        }
    }
    if (!std::isfinite(double(nll))) throw NumericError("non-finite sequence loss");

    // ---- backward
    Tensor<S> d_wp({3 * d, e + d});  // dL/dW', feeds both W and the factor path
    Tensor<S> d_bp({3 * d});
    Tensor<S> d_offset = sc.cell.offset.empty() ? Tensor<S>() : Tensor<S>({V});
    Tensor<S> dh_next({d}), dm_next({d});

    for (std::size_t t = steps; t-- > 0;) {
        const Tensor<S>& h = sc.h[t];
        const int target = tokens[t + 1];
        Tensor<S> u = cfg.uses_projection() ? matvec(params.projection, h) : h;
        Tensor<S> du({e});

        if (!sampled) {
            Tensor<S> logits = matvec(params.embeddings, u);
            add_scaled(logits, params.b_out);
            if (!sc.cell.offset.empty()) add_scaled(logits, sc.cell.offset);
            const S lse = log_sum_exp(logits);
            for (std::size_t j = 0; j < V; ++j) {
                S dl = std::exp(logits[j] - lse);
                if (j == std::size_t(target)) dl -= S(1);
                dl *= weight;
                if (dl == S(0)) continue;
                grads.b_out[j] += dl;
                if (!d_offset.empty()) d_offset[j] += dl;
                for (std::size_t i = 0; i < e; ++i) {
                    grads.embeddings(j, i) += dl * u[i];
                    du[i] += dl * params.embeddings(j, i);
                }
            }
        } else {
            const std::vector<int>& cand = sc.cand[t];
            Tensor<S> al({cand.size()});
            for (std::size_t j = 0; j < cand.size(); ++j) {
                const int id = cand[j];
                if (j > 0 && id == target) {
                    al[j] = -std::numeric_limits<S>::infinity();
                    continue;
                }
                S logit = params.b_out[std::size_t(id)];
                for (std::size_t i = 0; i < e; ++i)
                    logit += params.embeddings(std::size_t(id), i) * u[i];
                if (!sc.cell.offset.empty()) logit += sc.cell.offset[std::size_t(id)];
                al[j] = logit - S(std::log((*sampled->proposal)[std::size_t(id)]));
            }
            const S lse = log_sum_exp(al);
            for (std::size_t j = 0; j < cand.size(); ++j) {
                if (std::isinf(double(al[j]))) continue;
                S dl = std::exp(al[j] - lse);
                if (j == 0) dl -= S(1);
                dl *= weight;
                const std::size_t id = std::size_t(cand[j]);
                grads.b_out[id] += dl;
                if (!d_offset.empty()) d_offset[id] += dl;
                for (std::size_t i = 0; i < e; ++i) {
                    grads.embeddings(id, i) += dl * u[i];
                    du[i] += dl * params.embeddings(id, i);
                }
            }
        }

        Tensor<S> dh = dh_next;
        if (cfg.uses_projection()) {
            add_outer(grads.projection, du, h);
            Tensor<S> dh_out = matvec_t(params.projection, du);
            add_scaled(dh, dh_out);
        } else {
            add_scaled(dh, du);
        }

        // cell backward (coupled gates)
        const Tensor<S>& f = sc.f[t];
        const Tensor<S>& g = sc.g[t];
        const Tensor<S>& o = sc.o[t];
        const Tensor<S>& tm = sc.tanh_m[t];
        Tensor<S> dpre({3 * d});
        for (std::size_t i = 0; i < d; ++i) {
            const S mi_prev = t == 0 ? S(0) : sc.m[t - 1][i];
            const S mk = mask_at(t, i);
            const S gm = g[i] * mk;
            const S dm = dm_next[i] + dh[i] * o[i] * (S(1) - tm[i] * tm[i]);
            const S df = dm * (mi_prev - gm);
            const S dg = dm * (S(1) - f[i]) * mk;
            dpre[i] = dg * (S(1) - g[i] * g[i]);
            dpre[d + i] = df * f[i] * (S(1) - f[i]);
            dpre[2 * d + i] = dh[i] * tm[i] * o[i] * (S(1) - o[i]);
            dm_next[i] = dm * f[i];
        }
        add_outer(d_wp, dpre, sc.z[t]);
        add_scaled(d_bp, dpre);
        Tensor<S> dz = matvec_t(sc.cell.w, dpre);
        const std::size_t tok = std::size_t(tokens[t]);
        for (std::size_t i = 0; i < e; ++i) grads.embeddings(tok, i) += dz[i];
        for (std::size_t i = 0; i < d; ++i) dh_next[i] = dz[e + i];
    }

    // ---- route the per-sequence accumulators into parameter gradients
    add_scaled(grads.w, d_wp);
    add_scaled(grads.b, d_bp);

    Tensor<S> dc = sc.c.empty() ? Tensor<S>() : Tensor<S>({sc.c.extent(0)});
    if (cfg.has_factor()) {
        // W' = W + (left right)^T: d_left = dP right^T, d_right = left^T dP
        // with dP = d_wp^T.
        Tensor<S> dp = transpose(d_wp);                       // (e+d) x 3d
        Tensor<S> d_left = matmul(dp, transpose(sc.right));   // (e+d) x r
        Tensor<S> d_right = matmul(transpose(sc.left), dp);   // r x 3d
        const std::size_t K = params.z_left.extent(0), P = params.z_left.extent(1),
                          R = params.z_left.extent(2);
        for (std::size_t k = 0; k < K; ++k) {
            const S ck = sc.c[k];
            S acc = 0;
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t r2 = 0; r2 < R; ++r2) {
                    grads.z_left(k, p, r2) += ck * d_left(p, r2);
                    acc += params.z_left(k, p, r2) * d_left(p, r2);
                }
            dc[k] += acc;
        }
        const std::size_t Q3 = params.z_right.extent(1);
        for (std::size_t r2 = 0; r2 < R; ++r2)
            for (std::size_t q = 0; q < Q3; ++q) {
                const S dr = d_right(r2, q);
                if (dr == S(0)) continue;
                for (std::size_t k = 0; k < K; ++k) {
                    grads.z_right(r2, q, k) += dr * sc.c[k];
                    dc[k] += params.z_right(r2, q, k) * dr;
                }
            }
    }
    if (cfg.has_recurrent_bias()) {
        add_outer(grads.v_bias, d_bp, sc.c);
        Tensor<S> dvc = matvec_t(params.v_bias, d_bp);
        add_scaled(dc, dvc);
    }
    if (!d_offset.empty()) {
        if (cfg.bias_mode == BiasMode::Projected) {
            add_outer(grads.q, d_offset, sc.c);
            Tensor<S> dqc = matvec_t(params.q, d_offset);
            add_scaled(dc, dqc);
        } else {
            for (std::size_t j = 0; j < V; ++j) grads.class_bias(sc.class_row, j) += d_offset[j];
        }
    }
    if (!dc.empty()) {
        add_outer(grads.encoder.w2, dc, sc.henc);
        if (!grads.encoder.b2.empty()) add_scaled(grads.encoder.b2, dc);
        Tensor<S> dhe = matvec_t(params.encoder.w2, dc);
        for (std::size_t i = 0; i < dhe.size(); ++i)
            if (sc.pre1[i] <= S(0)) dhe[i] = S(0);
        add_outer(grads.encoder.w1, dhe, sc.raw);
        if (!grads.encoder.b1.empty()) add_scaled(grads.encoder.b1, dhe);
    }
    return nll;
}

template <typename S>
LossResult<S> batch_loss(const ModelParams<S>& params, const ModelConfig& cfg,
                         const ContextSchema& schema, const Batch& batch,
                         const std::vector<Tensor<S>>* dropout_masks,
                         const SampledSoftmax* sampled) {
    if (batch.rows() == 0) throw ArgumentError("empty batch");
    if (dropout_masks && dropout_masks->size() != batch.rows())
        throw DimensionError("dropout masks: " + std::to_string(dropout_masks->size()) +
                             " rows for a batch of " + std::to_string(batch.rows()));
    LossResult<S> out;
    out.grads = ModelParams<S>::zeros_like(params);
    const std::size_t total = batch.token_count();
    const S weight = S(1) / S(total);
    S nll_sum = 0;
    for (std::size_t row = 0; row < batch.rows(); ++row) {
        const Tensor<S>* mask = dropout_masks ? &(*dropout_masks)[row] : nullptr;
        try {
            nll_sum += seq_forward_backward(params, cfg, schema, batch.values[row],
                                            batch.ids[row], batch.lengths[row], mask, sampled,
                                            weight, out.grads);
        } catch (const NumericError& err) {
            throw NumericError(std::string(err.what()) + " (batch row " + std::to_string(row) +
                               ")");
        }
    }
    out.loss = nll_sum / S(total);
    return out;
}

}  // namespace detail

// Mean token-level cross entropy over the batch's non-pad positions, with
// gradients for every learnable array of the configured variant.
template <typename S>
LossResult<S> cross_entropy_loss(const ModelParams<S>& params, const ModelConfig& cfg,
                                 const ContextSchema& schema, const Batch& batch,
                                 const std::vector<Tensor<std::type_identity_t<S>>>* dropout_masks =
                                     nullptr) {
    return detail::batch_loss<S>(params, cfg, schema, batch, dropout_masks, nullptr);
}

// Sampled-softmax surrogate: per step the softmax runs over the target plus
// `sample_count` draws (with replacement) from the unigram proposal, each
// logit corrected by -log q. Draws that hit the target are dropped from the
// candidate set, so the target is counted exactly once.
template <typename S>
LossResult<S> sampled_softmax_loss(const ModelParams<S>& params, const ModelConfig& cfg,
                                   const ContextSchema& schema, const Batch& batch,
                                   const std::vector<double>& proposal, std::size_t sample_count,
                                   std::mt19937_64& rng,
                                   const std::vector<Tensor<std::type_identity_t<S>>>*
                                       dropout_masks = nullptr,
                                   const std::vector<int>* forced_samples = nullptr) {
    if (sample_count == 0 && !forced_samples)
        throw ConfigError("sampled_softmax_loss: need at least one sample");
    double mass = 0;
    for (double q : proposal) mass += q;
    if (!(mass > 0)) throw ConfigError("sampled softmax: proposal has zero mass");
    detail::SampledSoftmax spec;
    spec.proposal = &proposal;
    spec.cumulative = proposal;
    for (std::size_t i = 1; i < spec.cumulative.size(); ++i)
        spec.cumulative[i] += spec.cumulative[i - 1];
    spec.sample_count = sample_count;
    spec.rng = &rng;
    spec.forced_samples = forced_samples;
    return detail::batch_loss<S>(params, cfg, schema, batch, dropout_masks, &spec);
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
S global_grad_norm(const ModelParams<S>& grads) {
    double sq = 0;
    grads.for_each([&](const char*, const Tensor<S>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) sq += double(t[i]) * double(t[i]);
    });
    return S(std::sqrt(sq));
}

// Standard bias-corrected Adam preceded by global-norm clipping. Non-finite
// gradients abort the step with parameters untouched.
template <typename S>
void adam_step(ModelParams<S>& params, ModelParams<S>& grads, OptimizerState<S>& opt,
               const TrainConfig& tc) {
    bool finite = true;
    grads.for_each([&](const char*, const Tensor<S>& t) { finite = finite && t.all_finite(); });
    if (!finite) throw NumericError("adam_step: non-finite gradients; step aborted");

    if (tc.clip_norm > 0) {
        const S norm = global_grad_norm(grads);
        if (double(norm) > tc.clip_norm) {
            const S scale = S(tc.clip_norm) / norm;
            grads.for_each([&](const char*, Tensor<S>& t) {
                for (std::size_t i = 0; i < t.size(); ++i) t[i] *= scale;
            });
        }
    }

    opt.step += 1;
    const S b1 = S(tc.adam_beta1), b2 = S(tc.adam_beta2);
    const S corr1 = S(1) - S(std::pow(tc.adam_beta1, double(opt.step)));
    const S corr2 = S(1) - S(std::pow(tc.adam_beta2, double(opt.step)));
    const S lr = S(tc.learning_rate), eps = S(tc.adam_epsilon);

    params.for_each([&](const char* name, Tensor<S>& p) {
        Tensor<S>* g = grads.find(name);
        Tensor<S>* m = opt.first_moment.find(name);
        Tensor<S>* v = opt.second_moment.find(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            (*m)[i] = b1 * (*m)[i] + (S(1) - b1) * (*g)[i];
            (*v)[i] = b2 * (*v)[i] + (S(1) - b2) * (*g)[i] * (*g)[i];
            const S mhat = (*m)[i] / corr1;
            const S vhat = (*v)[i] / corr2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    });
}

// ---------------------------------------------------------------------------
// Training loop

template <typename S>
struct TrainResult {
    ModelParams<S> params;  // what was saved: best-dev, or final without dev
    double best_dev_ppl = std::numeric_limits<double>::quiet_NaN();
    double last_train_loss = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;
};

// Metrics lines are `step<TAB>train_loss<TAB>dev_ppl` (dev_ppl is nan when
// no dev split is given). Deterministic for a fixed seed: initialization,
// batch order, dropout and sampling each draw from their own named
// substream. The checkpoint on disk always holds the best-dev parameters
// seen so far (or the initial ones until the first evaluation), so a
// numeric abort leaves the last good checkpoint in place.
template <typename S>
TrainResult<S> train(const Corpus& corpus, const ModelConfig& cfg, const TrainConfig& tc,
                     const std::string& checkpoint_path, std::ostream* metrics = nullptr,
                     const std::function<void(std::size_t, double, double)>& progress = {}) {
    cfg.validate(corpus.schema);
    tc.validate(cfg.vocab_size);
    if (corpus.train.empty()) throw ArgumentError("train: empty corpus");

    SeedStreams streams(tc.seed);
    auto init_rng = streams.stream("init");
    auto dropout_rng = streams.stream("dropout");
    auto sample_rng = streams.stream("sample");

    TrainResult<S> result;
    ModelParams<S> params = init_params<S>(cfg, corpus.schema, init_rng);
    OptimizerState<S> opt = OptimizerState<S>::zeros_like(params);
    std::vector<double> proposal;
    if (tc.softmax_samples > 0) proposal = corpus.unigram_proposal();

    save_checkpoint(params, cfg, corpus.schema, corpus.vocab, checkpoint_path);
    result.params = params;

    const bool has_dev = !corpus.dev.empty();
    double best_ppl = std::numeric_limits<double>::infinity();

    std::size_t epoch = 0, cursor = 0;
    std::vector<Batch> batches =
        make_batches(corpus.train, tc.batch_size, streams.stream("batch", epoch)());

    double interval_sum = 0;
    std::size_t interval_count = 0;
    const std::size_t d = cfg.recurrent_dim;

    auto run_eval = [&](std::size_t step) {
        const double train_loss = interval_count ? interval_sum / double(interval_count)
                                                 : std::numeric_limits<double>::quiet_NaN();
        interval_sum = 0;
        interval_count = 0;
        double dev_ppl = std::numeric_limits<double>::quiet_NaN();
        if (has_dev) {
            dev_ppl = perplexity(params, cfg, corpus.schema, corpus.dev).perplexity;
            if (dev_ppl < best_ppl) {
                best_ppl = dev_ppl;
                save_checkpoint(params, cfg, corpus.schema, corpus.vocab, checkpoint_path);
                result.params = params;
                result.best_dev_ppl = dev_ppl;
            }
        }
        if (metrics) {
            metrics->precision(10);
            (*metrics) << step << '\t' << train_loss << '\t' << dev_ppl << '\n';
            metrics->flush();
        }
        if (progress) progress(step, train_loss, dev_ppl);
        result.last_train_loss = train_loss;
    };

    for (std::size_t step = 1; step <= tc.max_steps; ++step) {
        if (cursor == batches.size()) {
            ++epoch;
            batches = make_batches(corpus.train, tc.batch_size, streams.stream("batch", epoch)());
            cursor = 0;
        }
        const Batch& batch = batches[cursor++];

        std::vector<Tensor<S>> masks;
        const std::vector<Tensor<S>>* masks_ptr = nullptr;
        if (tc.keep_prob < 1.0) {
            if (tc.dropout_per_step) {
                for (std::size_t row = 0; row < batch.rows(); ++row) {
                    const std::size_t steps_r = batch.lengths[row] - 1;
                    masks.push_back(
                        recurrent_dropout_mask<S>(dropout_rng, tc.keep_prob, d, steps_r));
                }
            } else {
                Tensor<S> all =
                    recurrent_dropout_mask<S>(dropout_rng, tc.keep_prob, d, batch.rows());
                for (std::size_t row = 0; row < batch.rows(); ++row) {
                    Tensor<S> one({d});
                    for (std::size_t i = 0; i < d; ++i) one[i] = all(row, i);
                    masks.push_back(std::move(one));
                }
            }
            masks_ptr = &masks;
        }

        LossResult<S> loss;
        try {
            if (tc.softmax_samples > 0)
                loss = sampled_softmax_loss(params, cfg, corpus.schema, batch, proposal,
                                            tc.softmax_samples, sample_rng, masks_ptr);
            else
                loss = cross_entropy_loss(params, cfg, corpus.schema, batch, masks_ptr);
            adam_step(params, loss.grads, opt, tc);
        } catch (const NumericError& err) {
            throw NumericError(std::string(err.what()) + " at training step " +
                               std::to_string(step) + "; last good checkpoint retained at " +
                               checkpoint_path);
        }
        interval_sum += double(loss.loss);
        interval_count += 1;
        result.steps = step;

        if (step % tc.eval_interval == 0 || step == tc.max_steps) run_eval(step);
    }

    if (!has_dev && tc.max_steps > 0) {
        save_checkpoint(params, cfg, corpus.schema, corpus.vocab, checkpoint_path);
        result.params = params;
    }
    return result;
}

}  // namespace ctxlm
