#pragma once

#include <random>
#include <string>
#include <vector>

#include "ctxlm/data.hpp"
#include "ctxlm/eval.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

// Ancestral sampling from softmax(logits / temperature) until the end
// sentinel or max_len tokens. temperature == 0 decodes greedily (the
// temperature -> 0 limit). Deterministic for a fixed rng state.
template <typename S>
std::vector<int> generate_ids(const ModelParams<S>& params, const ModelConfig& cfg,
                              const ContextSchema& schema, const ContextValue& value,
                              std::size_t max_len, double temperature, std::mt19937_64& rng) {
    if (temperature < 0) throw ArgumentError("temperature must be >= 0");
    AdaptedCell<S> cell = adapt(params, cfg, schema, value);
    CellState<S> state(cfg.recurrent_dim);
    std::vector<int> out;
    int tok = Vocabulary::kBegin;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t t = 0; t < max_len; ++t) {
        Tensor<S> x = embedding_row(params, tok);
        state = cell_step(cell, x, state);
        int next;
        if (temperature == 0.0) {
            Tensor<S> logits = output_logits(params, cfg, cell, state.h);
            next = 0;
            for (std::size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[std::size_t(next)]) next = int(j);
        } else {
            Tensor<S> p = next_token_distribution(params, cfg, cell, state.h, temperature);
            const double x0 = u(rng);
            double acc = 0;
            next = int(p.size()) - 1;
            for (std::size_t j = 0; j < p.size(); ++j) {
                acc += double(p[j]);
                if (x0 < acc) {
                    next = int(j);
                    break;
                }
            }
        }
        if (next == Vocabulary::kEnd) break;
        out.push_back(next);
        tok = next;
    }
    return out;
}

template <typename S>
std::string generate_text(const ModelParams<S>& params, const ModelConfig& cfg,
                          const ContextSchema& schema, const Vocabulary& vocab,
                          const ContextValue& value, std::size_t max_len, double temperature,
                          std::mt19937_64& rng) {
    const std::vector<int> ids =
        generate_ids(params, cfg, schema, value, max_len, temperature, rng);
    std::string text;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (cfg.unit == Unit::Word && i) text += ' ';
        text += vocab.decode(ids[i]);
    }
    return text;
}

}  // namespace ctxlm
