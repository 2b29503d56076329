#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

// Fixed-order compensated accumulator; keeps reductions reproducible and
// exact enough that a forced-uniform model scores perplexity |V| exactly.
template <typename S>
class KahanSum {
public:
    void add(S x) {
        const S y = x - c_;
        const S t = s_ + y;
        c_ = (t - s_) - y;
        s_ = t;
    }
    S value() const { return s_; }

private:
    S s_ = 0, c_ = 0;
};

struct EvalReport {
    double perplexity = 0;
    std::int64_t token_count = 0;
    std::vector<double> doc_logprobs;
};

struct ClassificationReport {
    double accuracy = 0;
    std::vector<std::vector<std::int64_t>> confusion;  // [gold][predicted]
    std::vector<int> predicted;                        // per evaluated document
    std::vector<std::size_t> skipped;                  // docs whose context matches no label
};

namespace detail {

// Per-token log p(target) under a probability-space average of ensemble
// members (all members share config/schema/vocab). A single member follows
// the exact single-model floating-point path.
template <typename S>
std::vector<S> ensemble_token_logprobs(const std::vector<const ModelParams<S>*>& members,
                                       const ModelConfig& cfg, const ContextSchema& schema,
                                       const ContextValue& value, const std::vector<int>& tokens) {
    if (members.empty()) throw ArgumentError("ensemble: no members");
    if (tokens.size() < 2) throw ArgumentError("need a framed sequence of at least 2 tokens");
    check_token_ids<S>(tokens, cfg.vocab_size);

    const std::size_t M = members.size();
    std::vector<AdaptedCell<S>> cells;
    std::vector<CellState<S>> states;
    for (const ModelParams<S>* p : members) {
        cells.push_back(adapt(*p, cfg, schema, value));
        states.emplace_back(cfg.recurrent_dim);
    }
    std::vector<S> out;
    out.reserve(tokens.size() - 1);
    std::vector<S> lps(M);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        for (std::size_t i = 0; i < M; ++i) {
            Tensor<S> x = embedding_row(*members[i], tokens[t]);
            states[i] = cell_step(cells[i], x, states[i]);
            Tensor<S> logits = output_logits(*members[i], cfg, cells[i], states[i].h);
            lps[i] = logits[std::size_t(tokens[t + 1])] - log_sum_exp(logits);
        }
        if (M == 1) {
            out.push_back(lps[0]);
        } else {
            S mx = lps[0];
            for (std::size_t i = 1; i < M; ++i) mx = std::max(mx, lps[i]);
            S acc = 0;
            for (std::size_t i = 0; i < M; ++i) acc += std::exp(lps[i] - mx);
            out.push_back(mx + std::log(acc) - std::log(S(M)));
        }
    }
    return out;
}

}  // namespace detail

// exp of the mean negative log likelihood per predicted token, context
// supplied per document; always full softmax. Multiple members are averaged
// in probability space.
template <typename S>
EvalReport perplexity(const std::vector<const ModelParams<S>*>& members, const ModelConfig& cfg,
                      const ContextSchema& schema, const std::vector<Document>& docs) {
    if (docs.empty()) throw ArgumentError("perplexity: empty document set");
    EvalReport report;
    KahanSum<double> total;
    for (const Document& doc : docs) {
        std::vector<S> lps =
            detail::ensemble_token_logprobs(members, cfg, schema, doc.value, doc.ids);
        KahanSum<double> doc_total;
        for (S lp : lps) doc_total.add(double(lp));
        report.doc_logprobs.push_back(doc_total.value());
        total.add(doc_total.value());
        report.token_count += std::int64_t(lps.size());
    }
    report.perplexity = std::exp(-total.value() / double(report.token_count));
    return report;
}

template <typename S>
EvalReport perplexity(const ModelParams<S>& params, const ModelConfig& cfg,
                      const ContextSchema& schema, const std::vector<Document>& docs) {
    return perplexity(std::vector<const ModelParams<S>*>{&params}, cfg, schema, docs);
}

// Bayes-rule generative classification: argmax over labels of
// log p(text | label) + log prior. Ties break toward the lowest label index.
template <typename S>
std::pair<int, std::vector<S>> classify(const ModelParams<S>& params, const ModelConfig& cfg,
                                        const ContextSchema& schema,
                                        const std::vector<int>& tokens,
                                        const std::vector<ContextValue>& labels,
                                        const std::vector<double>& prior = {}) {
    if (labels.empty()) throw ArgumentError("classify: empty label set");
    if (!prior.empty() && prior.size() != labels.size())
        throw ArgumentError("classify: prior size does not match label set");
    std::vector<S> scores(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        scores[i] = sequence_logprob(params, cfg, schema, labels[i], tokens);
        if (!prior.empty()) scores[i] += S(std::log(prior[i]));
    }
    int best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = int(i);
    return {best, scores};
}

// Corpus-level accuracy. The gold label of a document is the label whose
// ContextValue equals the document's context exactly; documents matching no
// label are skipped and reported.
template <typename S>
ClassificationReport classification_report(const ModelParams<S>& params, const ModelConfig& cfg,
                                           const ContextSchema& schema,
                                           const std::vector<Document>& docs,
                                           const std::vector<ContextValue>& labels,
                                           const std::vector<double>& prior = {}) {
    ClassificationReport report;
    report.confusion.assign(labels.size(), std::vector<std::int64_t>(labels.size(), 0));
    std::int64_t correct = 0, evaluated = 0;
    for (std::size_t di = 0; di < docs.size(); ++di) {
        int gold = -1;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == docs[di].value) {
                gold = int(i);
                break;
            }
        if (gold < 0) {
            report.skipped.push_back(di);
            continue;
        }
        const auto [pred, scores] = classify(params, cfg, schema, docs[di].ids, labels, prior);
        report.predicted.push_back(pred);
        report.confusion[std::size_t(gold)][std::size_t(pred)] += 1;
        correct += pred == gold;
        evaluated += 1;
    }
    if (evaluated == 0) throw ArgumentError("classification: no document matches any label");
    report.accuracy = double(correct) / double(evaluated);
    return report;
}

// Per-token log p(token | history, ctx_a) - log p(token | history, ctx_b).
template <typename S>
std::vector<std::pair<std::string, S>> log_likelihood_ratio(
    const std::vector<const ModelParams<S>*>& members, const ModelConfig& cfg,
    const ContextSchema& schema, const Vocabulary& vocab, const std::vector<int>& tokens,
    const ContextValue& ctx_a, const ContextValue& ctx_b) {
    std::vector<S> lp_a = detail::ensemble_token_logprobs(members, cfg, schema, ctx_a, tokens);
    std::vector<S> lp_b = detail::ensemble_token_logprobs(members, cfg, schema, ctx_b, tokens);
    std::vector<std::pair<std::string, S>> out;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t)
        out.push_back({vocab.decode(tokens[t + 1]), lp_a[t] - lp_b[t]});
    return out;
}

// Tokens ranked by their softmax-bias offset under the given context;
// requires the projected or one_hot bias mode.
template <typename S>
std::vector<std::pair<std::string, S>> top_boosted_words(const ModelParams<S>& params,
                                                         const ModelConfig& cfg,
                                                         const ContextSchema& schema,
                                                         const Vocabulary& vocab,
                                                         const ContextValue& value,
                                                         std::size_t n) {
    if (!cfg.has_softmax_offset())
        throw CapabilityError("top_boosted_words: softmax bias adaptation is off");
    AdaptedCell<S> cell = adapt(params, cfg, schema, value);
    std::vector<std::pair<std::string, S>> scored;
    for (std::size_t j = 0; j < cfg.vocab_size; ++j)
        scored.push_back({vocab.decode(int(j)), cell.offset[j]});
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (scored.size() > n) scored.resize(n);
    return scored;
}

namespace detail {
inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}
}  // namespace detail

// CSV export of context embeddings: one row per context, schema fields
// first, then the k embedding components (for external projection).
template <typename S>
void export_context_embeddings(const ModelParams<S>& params, const ModelConfig& cfg,
                               const ContextSchema& schema,
                               const std::vector<ContextValue>& values, std::ostream& os) {
    if (!cfg.uses_context_embedding())
        throw CapabilityError("export_context_embeddings: variant has no context embedding");
    for (const ContextVar& var : schema.variables) os << detail::csv_escape(var.name) << ',';
    for (std::size_t i = 0; i < cfg.context_dim; ++i)
        os << 'c' << i << (i + 1 < cfg.context_dim ? "," : "\n");
    os.precision(17);
    for (const ContextValue& value : values) {
        for (std::size_t i = 0; i < schema.variables.size(); ++i) {
            const ContextVar& var = schema.variables[i];
            const ContextSlot& slot = value.slots[i];
            if (slot.tag == ContextSlot::Tag::Category)
                os << detail::csv_escape(slot.index == 0 || slot.index > var.categories.size()
                                             ? std::string("<rare>")
                                             : var.categories[slot.index - 1]);
            else if (slot.tag == ContextSlot::Tag::Number)
                os << slot.number;
            os << ',';
        }
        AdaptedCell<S> cell = adapt(params, cfg, schema, value);
        for (std::size_t i = 0; i < cfg.context_dim; ++i)
            os << double(cell.c[i]) << (i + 1 < cfg.context_dim ? "," : "\n");
    }
}

// Full next-token distribution at a given state; exercised directly by the
// probability-normalization checks and by sampling.
template <typename S>
Tensor<S> next_token_distribution(const ModelParams<S>& params, const ModelConfig& cfg,
                                  const AdaptedCell<S>& cell, const Tensor<S>& h,
                                  double temperature = 1.0) {
    Tensor<S> logits = output_logits(params, cfg, cell, h);
    if (temperature != 1.0) {
        if (!(temperature > 0)) throw ArgumentError("temperature must be positive");
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] /= S(temperature);
    }
    const S lse = log_sum_exp(logits);
    Tensor<S> p({logits.size()});
    for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
    return p;
}

}  // namespace ctxlm
