#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ctxlm/context.hpp"
#include "ctxlm/errors.hpp"
#include "ctxlm/tensor.hpp"

namespace ctxlm {

enum class Variant : std::uint8_t { Unadapted = 0, SoftmaxBias = 1, ConcatCell = 2, FactorCell = 3 };
enum class BiasMode : std::uint8_t { Off = 0, OneHot = 1, Projected = 2 };
enum class Unit : std::uint8_t { Word = 0, Character = 1 };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Unadapted: return "unadapted";
        case Variant::SoftmaxBias: return "softmax_bias";
        case Variant::ConcatCell: return "concat_cell";
        case Variant::FactorCell: return "factor_cell";
    }
    return "?";
}

inline const char* bias_mode_name(BiasMode m) {
    switch (m) {
        case BiasMode::Off: return "off";
        case BiasMode::OneHot: return "one_hot";
        case BiasMode::Projected: return "projected";
    }
    return "?";
}

struct ModelConfig {
    Variant variant = Variant::FactorCell;
    std::size_t vocab_size = 0;     // |V|
    std::size_t embedding_dim = 0;  // e
    std::size_t recurrent_dim = 0;  // d
    std::size_t context_dim = 0;    // k
    std::size_t rank = 0;           // r, factor_cell only
    BiasMode bias_mode = BiasMode::Off;
    Unit unit = Unit::Word;
    std::size_t encoder_hidden_dim = 0;  // 0 -> 2k
    bool encoder_bias = true;
    std::size_t onehot_threshold = 64;

    std::size_t gate_dim() const { return 3 * recurrent_dim; }
    std::size_t input_dim() const { return embedding_dim + recurrent_dim; }
    std::size_t encoder_hidden() const {
        return encoder_hidden_dim ? encoder_hidden_dim : 2 * context_dim;
    }

    bool has_factor() const { return variant == Variant::FactorCell; }
    bool has_recurrent_bias() const {
        return variant == Variant::ConcatCell || variant == Variant::FactorCell;
    }
    bool has_softmax_offset() const {
        return variant != Variant::Unadapted && bias_mode != BiasMode::Off;
    }
    // The embedding c feeds the V_bias path and/or the projected offset.
    bool uses_context_embedding() const {
        return has_recurrent_bias() ||
               (variant == Variant::SoftmaxBias && bias_mode == BiasMode::Projected);
    }
    bool uses_projection() const { return embedding_dim != recurrent_dim; }

    void validate(const ContextSchema& schema) const {
        if (vocab_size < 4) throw ConfigError("vocab_size must cover the reserved ids");
        if (!embedding_dim || !recurrent_dim) throw ConfigError("embedding/recurrent dims required");
        if (variant == Variant::FactorCell && rank < 1)
            throw ConfigError("factor_cell requires rank >= 1");
        if (variant != Variant::FactorCell && rank != 0)
            throw ConfigError("rank is only meaningful for factor_cell");
        if (variant == Variant::Unadapted && bias_mode != BiasMode::Off)
            throw ConfigError("unadapted model cannot adapt the softmax bias");
        if (uses_context_embedding() && context_dim == 0)
            throw ConfigError("context_dim required for adapted variants");
        if (bias_mode == BiasMode::OneHot) {
            if (!schema.all_categorical())
                throw ConfigError("one_hot bias mode requires all-categorical context variables");
            if (schema.class_count() > onehot_threshold)
                throw ConfigError("one_hot bias mode: joint cardinality " +
                                  std::to_string(schema.class_count()) + " exceeds threshold " +
                                  std::to_string(onehot_threshold));
        }
    }
};

// Every learnable array. Arrays a variant does not use stay empty; for_each
// visits non-empty arrays in a fixed order, which also pins the RNG draw
// order at initialization and the layout of checkpoints and optimizer state.
template <typename S>
struct ModelParams {
    Tensor<S> embeddings;   // E, |V| x e (tied input/output)
    Tensor<S> projection;   // L, e x d; empty when e == d
    Tensor<S> w;            // 3d x (e+d), gate order [i, f, o]
    Tensor<S> b;            // 3d
    Tensor<S> v_bias;       // 3d x k
    Tensor<S> z_left;       // k x (e+d) x r
    Tensor<S> z_right;      // r x 3d x k
    Tensor<S> b_out;        // |V|
    Tensor<S> q;            // |V| x k, projected bias mode
    Tensor<S> class_bias;   // n_classes x |V|, one_hot bias mode
    ContextEncoder<S> encoder;

    template <typename Fn>
    void for_each(Fn&& fn) {
        auto visit = [&](const char* name, Tensor<S>& t) {
            if (!t.empty()) fn(name, t);
        };
        visit("embeddings", embeddings);
        visit("projection", projection);
        visit("w", w);
        visit("b", b);
        visit("v_bias", v_bias);
        visit("z_left", z_left);
        visit("z_right", z_right);
        visit("b_out", b_out);
        visit("q", q);
        visit("class_bias", class_bias);
        visit("enc_w1", encoder.w1);
        visit("enc_b1", encoder.b1);
        visit("enc_w2", encoder.w2);
        visit("enc_b2", encoder.b2);
    }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        const_cast<ModelParams*>(this)->for_each(
            [&](const char* name, Tensor<S>& t) { fn(name, const_cast<const Tensor<S>&>(t)); });
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each([&](const char*, const Tensor<S>& t) { n += t.size(); });
        return n;
    }

    Tensor<S>* find(const std::string& name) {
        Tensor<S>* out = nullptr;
        for_each([&](const char* n, Tensor<S>& t) {
            if (name == n) out = &t;
        });
        return out;
    }

    static ModelParams zeros_like(const ModelParams& other) {
        ModelParams out;
        out.shape_from(other);
        return out;
    }

    void shape_from(const ModelParams& other) {
        auto z = [](const Tensor<S>& t) { return t.empty() ? Tensor<S>() : Tensor<S>(t.shape()); };
        embeddings = z(other.embeddings);
        projection = z(other.projection);
        w = z(other.w);
        b = z(other.b);
        v_bias = z(other.v_bias);
        z_left = z(other.z_left);
        z_right = z(other.z_right);
        b_out = z(other.b_out);
        q = z(other.q);
        class_bias = z(other.class_bias);
        encoder.w1 = z(other.encoder.w1);
        encoder.b1 = z(other.encoder.b1);
        encoder.w2 = z(other.encoder.w2);
        encoder.b2 = z(other.encoder.b2);
    }

    template <typename T>
    ModelParams<T> cast() const {
        ModelParams<T> out;
        out.embeddings = embeddings.template cast<T>();
        out.projection = projection.template cast<T>();
        out.w = w.template cast<T>();
        out.b = b.template cast<T>();
        out.v_bias = v_bias.template cast<T>();
        out.z_left = z_left.template cast<T>();
        out.z_right = z_right.template cast<T>();
        out.b_out = b_out.template cast<T>();
        out.q = q.template cast<T>();
        out.class_bias = class_bias.template cast<T>();
        out.encoder.w1 = encoder.w1.template cast<T>();
        out.encoder.b1 = encoder.b1.template cast<T>();
        out.encoder.w2 = encoder.w2.template cast<T>();
        out.encoder.b2 = encoder.b2.template cast<T>();
        return out;
    }
};

// Zero-filled parameter arrays with the exact shapes the configuration
// calls for; arrays the variant does not use stay empty.
template <typename S>
ModelParams<S> allocate_params(const ModelConfig& cfg, const ContextSchema& schema) {
    cfg.validate(schema);
    const std::size_t v = cfg.vocab_size, e = cfg.embedding_dim, d = cfg.recurrent_dim;
    const std::size_t k = cfg.context_dim, r = cfg.rank;

    ModelParams<S> p;
    p.embeddings = Tensor<S>({v, e});
    if (cfg.uses_projection()) p.projection = Tensor<S>({e, d});
    p.w = Tensor<S>({3 * d, e + d});
    p.b = Tensor<S>({3 * d});
    if (cfg.has_recurrent_bias()) p.v_bias = Tensor<S>({3 * d, k});
    if (cfg.has_factor()) {
        p.z_left = Tensor<S>({k, e + d, r});
        p.z_right = Tensor<S>({r, 3 * d, k});
    }
    p.b_out = Tensor<S>({v});
    if (cfg.bias_mode == BiasMode::Projected && cfg.variant != Variant::Unadapted)
        p.q = Tensor<S>({v, k});
    if (cfg.bias_mode == BiasMode::OneHot && cfg.variant != Variant::Unadapted)
        p.class_bias = Tensor<S>({schema.class_count(), v});
    if (cfg.uses_context_embedding()) {
        const std::size_t raw = schema.encoded_width(), hid = cfg.encoder_hidden();
        p.encoder.w1 = Tensor<S>({hid, raw});
        p.encoder.w2 = Tensor<S>({k, hid});
        if (cfg.encoder_bias) {
            p.encoder.b1 = Tensor<S>({hid});
            p.encoder.b2 = Tensor<S>({k});
        }
    }
    return p;
}

// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)) for matrices, zeros
// for biases. The basis tensors start at 0.1 * s so that early training
// behaves like a ConcatCell and the adaptation grows from near zero.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, const ContextSchema& schema,
                           std::mt19937_64& rng) {
    const std::size_t e = cfg.embedding_dim, d = cfg.recurrent_dim;
    const std::size_t k = cfg.context_dim, r = cfg.rank;
    ModelParams<S> p = allocate_params<S>(cfg, schema);

    auto uniform_fill = [&](Tensor<S>& t, double fan_in, double fan_out, double scale) {
        const double s = scale * std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-s, s);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = S(dist(rng));
    };
    p.for_each([&](const std::string& name, Tensor<S>& t) {
        if (t.rank() == 1) return;  // biases stay zero
        if (name == "z_left")
            uniform_fill(t, double(k), double((e + d) * r), 0.1);
        else if (name == "z_right")
            uniform_fill(t, double(r * 3 * d), double(k), 0.1);
        else if (name == "class_bias")
            t.fill(S(0));
        else
            uniform_fill(t, double(t.extent(0)), double(t.extent(1)), 1.0);
    });
    return p;
}

// The low-rank adaptation of Eq. 3/4: left = c x_1 Z_L is (e+d) x r, right =
// Z_R x_3 c is r x 3d, and their product lands in the 3d x (e+d) gate layout
// via an explicit transpose.
template <typename S>
Tensor<S> compute_adaptation(const Tensor<S>& c, const Tensor<S>& z_left,
                             const Tensor<S>& z_right) {
    Tensor<S> left = mode1_product(c, z_left);    // (e+d) x r
    Tensor<S> right = mode3_product(z_right, c);  // r x 3d
    return transpose(matmul(left, right));        // 3d x (e+d)
}

// Per-context precomputed cell: once W' and b' are materialized, stepping
// costs the same as an unadapted cell of equal size.
template <typename S>
struct AdaptedCell {
    Tensor<S> w;       // W', 3d x (e+d)
    Tensor<S> b;       // b', 3d
    Tensor<S> offset;  // softmax bias offset, |V|; empty when mode is off
    Tensor<S> c;       // the context embedding that produced this cell; may be empty
};

template <typename S>
struct CellState {
    Tensor<S> h;
    Tensor<S> m;

    explicit CellState(std::size_t d = 0) : h({d ? d : 1}), m({d ? d : 1}) {
        if (!d) {
            h = Tensor<S>();
            m = Tensor<S>();
        }
    }
};

template <typename S>
AdaptedCell<S> adapt(const ModelParams<S>& params, const ModelConfig& cfg,
                     const ContextSchema& schema, const ContextValue& value) {
    AdaptedCell<S> cell;
    if (cfg.uses_context_embedding()) {
        Tensor<S> raw = encode_raw<S>(schema, value);
        cell.c = embed_context(params.encoder, raw);
    }
    if (cfg.has_factor()) {
        cell.w = params.w;
        Tensor<S> a = compute_adaptation(cell.c, params.z_left, params.z_right);
        add_scaled(cell.w, a);
    } else {
        cell.w = params.w;
    }
    cell.b = params.b;
    if (cfg.has_recurrent_bias()) {
        Tensor<S> vb = matvec(params.v_bias, cell.c);
        add_scaled(cell.b, vb);
    }
    if (cfg.bias_mode == BiasMode::Projected && cfg.variant != Variant::Unadapted) {
        cell.offset = matvec(params.q, cell.c);
    } else if (cfg.bias_mode == BiasMode::OneHot && cfg.variant != Variant::Unadapted) {
        const std::size_t row = joint_class_index(schema, value);
        cell.offset = Tensor<S>({cfg.vocab_size});
        for (std::size_t j = 0; j < cfg.vocab_size; ++j)
            cell.offset[j] = params.class_bias(row, j);
    }
    return cell;
}

template <typename S>
inline S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// One step of the coupled-gate LSTM: [i,f,o] = W'[w_emb, h] + b', the forget
// gate gets the +1.0 shift, and the input gate is 1 - f.
template <typename S>
CellState<S> cell_step(const AdaptedCell<S>& cell, const Tensor<S>& w_emb,
                       const CellState<S>& state) {
    const std::size_t gd = cell.w.extent(0), in = cell.w.extent(1);
    const std::size_t d = gd / 3, e = in - d;
    if (w_emb.extent(0) != e || state.h.extent(0) != d)
        throw DimensionError("cell_step: input " + w_emb.shape_str() + ", state " +
                             state.h.shape_str() + " vs cell " + cell.w.shape_str());

    Tensor<S> z({in});
    for (std::size_t i = 0; i < e; ++i) z[i] = w_emb[i];
    for (std::size_t i = 0; i < d; ++i) z[e + i] = state.h[i];

    Tensor<S> pre = matvec(cell.w, z);
    add_scaled(pre, cell.b);

    CellState<S> next(d);
    for (std::size_t i = 0; i < d; ++i) {
        const S f = sigmoid(pre[d + i] + S(1));
        const S g = std::tanh(pre[i]);
        const S m = state.m[i] * f + (S(1) - f) * g;
        next.m[i] = m;
        next.h[i] = std::tanh(m) * sigmoid(pre[2 * d + i]);
    }
    if (!next.h.all_finite() || !next.m.all_finite())
        throw NumericError("cell_step: non-finite state");
    return next;
}

// Logits of Eq. 6 without the softmax: E (L h) + b_out + offset. The L
// projection is skipped when e == d.
template <typename S>
Tensor<S> output_logits(const ModelParams<S>& params, const ModelConfig& cfg,
                        const AdaptedCell<S>& cell, const Tensor<S>& h) {
    if (h.extent(0) != cfg.recurrent_dim)
        throw DimensionError("output_logits: h " + h.shape_str() + ", expected (" +
                             std::to_string(cfg.recurrent_dim) + ")");
    Tensor<S> u = cfg.uses_projection() ? matvec(params.projection, h) : h;
    Tensor<S> logits = matvec(params.embeddings, u);
    add_scaled(logits, params.b_out);
    if (!cell.offset.empty()) add_scaled(logits, cell.offset);
    return logits;
}

template <typename S>
S log_sum_exp(const Tensor<S>& v) {
    S mx = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) mx = std::max(mx, v[i]);
    S acc = 0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += std::exp(v[i] - mx);
    return mx + std::log(acc);
}

template <typename S>
void check_token_ids(const std::vector<int>& tokens, std::size_t vocab_size) {
    for (int id : tokens)
        if (id < 0 || std::size_t(id) >= vocab_size)
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(vocab_size));
}

template <typename S>
Tensor<S> embedding_row(const ModelParams<S>& params, int id) {
    const std::size_t e = params.embeddings.extent(1);
    Tensor<S> x({e});
    for (std::size_t i = 0; i < e; ++i) x[i] = params.embeddings(std::size_t(id), i);
    return x;
}

// log p(w_{1:T}) = sum_t log softmax(logits_t)[w_{t+1}] over the framed
// sequence; one adapt() per call, then plain stepping.
template <typename S>
S sequence_logprob_cell(const ModelParams<S>& params, const ModelConfig& cfg,
                        const AdaptedCell<S>& cell, const std::vector<int>& tokens) {
    if (tokens.size() < 2)
        throw ArgumentError("sequence_logprob: need a framed sequence of at least 2 tokens");
    check_token_ids<S>(tokens, cfg.vocab_size);
    CellState<S> state(cfg.recurrent_dim);
    S total = 0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        Tensor<S> x = embedding_row(params, tokens[t]);
        try {
            state = cell_step(cell, x, state);
        } catch (const NumericError&) {
            throw NumericError("sequence_logprob: non-finite state at step " + std::to_string(t));
        }
        Tensor<S> logits = output_logits(params, cfg, cell, state.h);
        total += logits[std::size_t(tokens[t + 1])] - log_sum_exp(logits);
    }
    return total;
}

template <typename S>
S sequence_logprob(const ModelParams<S>& params, const ModelConfig& cfg,
                   const ContextSchema& schema, const ContextValue& value,
                   const std::vector<int>& tokens) {
    AdaptedCell<S> cell = adapt(params, cfg, schema, value);
    return sequence_logprob_cell(params, cfg, cell, tokens);
}

}  // namespace ctxlm
