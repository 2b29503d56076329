#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ctxlm/context.hpp"
#include "ctxlm/errors.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

// ---------------------------------------------------------------------------
// Preprocessing

inline std::string ascii_lower(std::string s) {
    for (char& ch : s)
        if (ch >= 'A' && ch <= 'Z') ch += 32;
    return s;
}

inline bool is_ascii_punct(unsigned char c) {
    return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
           (c >= '{' && c <= '~');
}

inline bool is_word_char(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80;
}

// Decode one UTF-8 code point starting at s[i]; advances i. Malformed bytes
// decode to U+FFFD one byte at a time.
inline char32_t utf8_next(const std::string& s, std::size_t& i) {
    const unsigned char c0 = s[i];
    std::size_t len = 1;
    char32_t cp = 0xFFFD;
    if (c0 < 0x80) {
        cp = c0;
    } else if ((c0 >> 5) == 0x6) {
        len = 2;
        cp = c0 & 0x1F;
    } else if ((c0 >> 4) == 0xE) {
        len = 3;
        cp = c0 & 0x0F;
    } else if ((c0 >> 3) == 0x1E) {
        len = 4;
        cp = c0 & 0x07;
    } else {
        ++i;
        return 0xFFFD;
    }
    if (i + len > s.size()) {
        ++i;
        return 0xFFFD;
    }
    for (std::size_t j = 1; j < len; ++j) {
        const unsigned char cj = s[i + j];
        if ((cj >> 6) != 0x2) {
            ++i;
            return 0xFFFD;
        }
        cp = (cp << 6) | (cj & 0x3F);
    }
    i += len;
    return cp;
}

inline std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += char(cp);
    } else if (cp < 0x800) {
        out += char(0xC0 | (cp >> 6));
        out += char(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += char(0xE0 | (cp >> 12));
        out += char(0x80 | ((cp >> 6) & 0x3F));
        out += char(0x80 | (cp & 0x3F));
    } else {
        out += char(0xF0 | (cp >> 18));
        out += char(0x80 | ((cp >> 12) & 0x3F));
        out += char(0x80 | ((cp >> 6) & 0x3F));
        out += char(0x80 | (cp & 0x3F));
    }
    return out;
}

// Word mode: lowercase, strip punctuation, whitespace-tokenize. Apostrophes
// and hyphens survive only between word characters ("don't", "e-mail"); the
// exact strip set is frozen here so vocabulary builds are reproducible.
// Character mode: lowercase, one token per unicode scalar value.
// Both modes truncate to `cap` tokens (0 = no cap).
inline std::vector<std::string> preprocess(const std::string& text, Unit unit, std::size_t cap) {
    std::vector<std::string> tokens;
    const std::string lowered = ascii_lower(text);
    if (unit == Unit::Word) {
        std::string cleaned;
        cleaned.reserve(lowered.size());
        for (std::size_t i = 0; i < lowered.size(); ++i) {
            const unsigned char c = lowered[i];
            if (c == '\'' || c == '-') {
                const bool internal = i > 0 && i + 1 < lowered.size() &&
                                      is_word_char(lowered[i - 1]) && is_word_char(lowered[i + 1]);
                cleaned += internal ? char(c) : ' ';
            } else if (is_ascii_punct(c)) {
                cleaned += ' ';
            } else {
                cleaned += char(c);
            }
        }
        std::istringstream iss(cleaned);
        std::string tok;
        while (iss >> tok) {
            tokens.push_back(tok);
            if (cap && tokens.size() >= cap) break;
        }
    } else {
        std::size_t i = 0;
        while (i < lowered.size()) {
            tokens.push_back(utf8_encode(utf8_next(lowered, i)));
            if (cap && tokens.size() >= cap) break;
        }
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary

struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBegin = 2;
    static constexpr int kEnd = 3;

    Unit unit = Unit::Word;
    std::vector<std::string> id_to_token{"<pad>", "<unk>", "<s>", "</s>"};
    std::vector<std::int64_t> counts{0, 0, 0, 0};  // train-split occurrences per id
    std::unordered_map<std::string, int> token_to_id;

    std::size_t size() const { return id_to_token.size(); }

    void rebuild_index() {
        token_to_id.clear();
        for (std::size_t i = 0; i < id_to_token.size(); ++i)
            token_to_id[id_to_token[i]] = int(i);
    }

    int lookup(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& decode(int id) const {
        if (id < 0 || std::size_t(id) >= id_to_token.size())
            throw VocabError("id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(id_to_token.size()));
        return id_to_token[std::size_t(id)];
    }

    // Framed encoding: <s> tokens </s>.
    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size() + 2);
        ids.push_back(kBegin);
        for (const std::string& t : tokens) ids.push_back(lookup(t));
        ids.push_back(kEnd);
        return ids;
    }
};

// Tokens with count >= min_count, ordered by descending count then lexical;
// vocab_cap > 0 additionally keeps only the top entries.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& train_docs, Unit unit,
                              std::int64_t min_count, std::size_t vocab_cap = 0) {
    if (train_docs.empty()) throw ArgumentError("build_vocab: empty train split");
    std::map<std::string, std::int64_t> freq;
    for (const auto& doc : train_docs)
        for (const std::string& t : doc) ++freq[t];

    std::vector<std::pair<std::string, std::int64_t>> kept;
    for (const auto& [tok, n] : freq)
        if (n >= min_count) kept.push_back({tok, n});
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (vocab_cap && kept.size() > vocab_cap) kept.resize(vocab_cap);

    Vocabulary v;
    v.unit = unit;
    for (const auto& [tok, n] : kept) {
        v.id_to_token.push_back(tok);
        v.counts.push_back(0);
    }
    v.rebuild_index();
    // Unigram counts over framed predicted positions (everything after <s>),
    // so the sampled-softmax proposal matches the target distribution.
    for (const auto& doc : train_docs) {
        for (const std::string& t : doc) ++v.counts[std::size_t(v.lookup(t))];
        ++v.counts[Vocabulary::kEnd];
    }
    return v;
}

inline void dump_vocab(const Vocabulary& v, std::ostream& os) {
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
        os << i << '\t' << v.id_to_token[i] << '\t' << v.counts[i] << '\n';
}

// ---------------------------------------------------------------------------
// JSONL ingestion

using RawValue = std::variant<std::string, double>;
using RawContext = std::map<std::string, RawValue>;

struct RawDocument {
    std::string text;
    RawContext context;
};

struct Document {
    std::string text;
    std::vector<int> ids;  // framed <s> ... </s>
    ContextValue value;
};

inline std::string raw_value_key(const RawValue& v) {
    if (std::holds_alternative<std::string>(v)) return std::get<std::string>(v);
    const double d = std::get<double>(v);
    if (d == std::int64_t(d)) return std::to_string(std::int64_t(d));
    std::ostringstream os;
    os << d;
    return os.str();
}

// One record per line: {"context": {...}, "text": "..."}. In lenient mode
// malformed lines are reported to `warnings` and skipped instead of thrown.
inline std::vector<RawDocument> load_jsonl_raw(const std::string& path, bool lenient = false,
                                               std::vector<std::string>* warnings = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<RawDocument> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fail = [&](const std::string& what) {
            const std::string msg = path + ":" + std::to_string(lineno) + ": " + what;
            if (!lenient) throw FormatError(msg);
            if (warnings) warnings->push_back(msg);
        };
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail("malformed JSON");
            continue;
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            fail("missing \"text\" string field");
            continue;
        }
        RawDocument doc;
        doc.text = j["text"].get<std::string>();
        if (j.contains("context")) {
            if (!j["context"].is_object()) {
                fail("\"context\" must be an object");
                continue;
            }
            bool bad = false;
            for (auto it = j["context"].begin(); it != j["context"].end(); ++it) {
                if (it.value().is_string())
                    doc.context[it.key()] = it.value().get<std::string>();
                else if (it.value().is_number())
                    doc.context[it.key()] = it.value().get<double>();
                else if (it.value().is_null())
                    continue;  // explicit null = missing
                else {
                    fail("context value for '" + it.key() + "' must be a string, number or null");
                    bad = true;
                    break;
                }
            }
            if (bad) continue;
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

// Validate a raw context against the schema. Unknown keys are schema errors;
// absent keys become missing slots (encoded as the expected value).
inline ContextValue to_context_value(const ContextSchema& schema, const RawContext& raw) {
    for (const auto& [key, val] : raw)
        if (!schema.find(key)) throw EncodingError("unknown context key '" + key + "'");
    ContextValue value;
    for (const ContextVar& var : schema.variables) {
        auto it = raw.find(var.name);
        if (it == raw.end()) {
            value.slots.push_back(ContextSlot::missing());
            continue;
        }
        if (var.kind == VarKind::Categorical) {
            value.slots.push_back(ContextSlot::category(var.category_index(raw_value_key(it->second))));
        } else {
            if (!std::holds_alternative<double>(it->second))
                throw EncodingError("context variable '" + var.name + "' expects a number");
            value.slots.push_back(ContextSlot::numeric(std::get<double>(it->second)));
        }
    }
    return value;
}

inline std::vector<Document> load_jsonl(const std::string& path, const ContextSchema& schema,
                                        bool lenient = false,
                                        std::vector<std::string>* warnings = nullptr) {
    std::vector<Document> docs;
    for (const RawDocument& raw : load_jsonl_raw(path, lenient, warnings)) {
        Document d;
        d.text = raw.text;
        d.value = to_context_value(schema, raw.context);
        docs.push_back(std::move(d));
    }
    return docs;
}

// ---------------------------------------------------------------------------
// Schema fitting

struct SchemaSpec {
    std::vector<std::pair<std::string, VarKind>> variables;
};

// Category dictionaries and standardization statistics come from the train
// split only and are frozen into the schema. Categories seen fewer than
// min_count times fall into the reserved rare bucket (index 0).
inline ContextSchema fit_schema(const SchemaSpec& spec, const std::vector<RawDocument>& train,
                                std::int64_t min_count = 1) {
    ContextSchema schema;
    for (const auto& [name, kind] : spec.variables) {
        ContextVar var;
        var.name = name;
        var.kind = kind;
        if (kind == VarKind::Categorical) {
            std::map<std::string, std::int64_t> freq;
            for (const RawDocument& d : train) {
                auto it = d.context.find(name);
                if (it != d.context.end()) ++freq[raw_value_key(it->second)];
            }
            std::vector<std::pair<std::string, std::int64_t>> kept;
            for (const auto& [key, n] : freq)
                if (n >= min_count) kept.push_back({key, n});
            std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
                if (a.second != b.second) return a.second > b.second;
                return a.first < b.first;
            });
            for (const auto& [key, n] : kept) var.categories.push_back(key);
            var.cardinality = var.categories.size() + 1;
            if (var.cardinality < 2)
                throw ConfigError("context variable '" + name + "' has no categories in train");
        } else {
            double sum = 0, sq = 0;
            std::int64_t n = 0;
            for (const RawDocument& d : train) {
                auto it = d.context.find(name);
                if (it == d.context.end()) continue;
                if (!std::holds_alternative<double>(it->second))
                    throw EncodingError("context variable '" + name + "' expects a number");
                const double x = std::get<double>(it->second);
                sum += x;
                sq += x * x;
                ++n;
            }
            if (n == 0) throw ConfigError("context variable '" + name + "' has no values in train");
            var.mean = sum / double(n);
            const double variance = std::max(0.0, sq / double(n) - var.mean * var.mean);
            var.stddev = variance > 0 ? std::sqrt(variance) : 1.0;
        }
        schema.variables.push_back(std::move(var));
    }
    schema.validate();
    return schema;
}

// ---------------------------------------------------------------------------
// Corpus and batching

struct Corpus {
    ContextSchema schema;
    Vocabulary vocab;
    std::vector<Document> train;
    std::vector<Document> dev;
    std::vector<Document> test;

    std::int64_t train_token_count() const {
        std::int64_t n = 0;
        for (const Document& d : train) n += std::int64_t(d.ids.size()) - 1;  // predicted positions
        return n;
    }

    // Normalized unigram proposal over vocabulary ids.
    std::vector<double> unigram_proposal() const {
        std::vector<double> p(vocab.counts.size(), 0.0);
        double total = 0;
        for (std::int64_t c : vocab.counts) total += double(c);
        if (total <= 0) throw ConfigError("unigram proposal: zero total mass");
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = double(vocab.counts[i]) / total;
        return p;
    }
};

struct CorpusOptions {
    Unit unit = Unit::Word;
    std::size_t truncate_cap = 200;
    std::int64_t vocab_min_count = 1;
    std::size_t vocab_cap = 0;
    std::int64_t context_min_count = 1;
    bool lenient = false;
};

// Load, fit schema on train, build vocabulary on train, tokenize all splits.
// Documents that are empty after preprocessing are dropped with a warning.
inline Corpus build_corpus(const std::string& train_path, const std::string& dev_path,
                           const std::string& test_path, const SchemaSpec& spec,
                           const CorpusOptions& opt,
                           std::vector<std::string>* warnings = nullptr) {
    Corpus corpus;
    std::vector<RawDocument> raw_train = load_jsonl_raw(train_path, opt.lenient, warnings);
    if (raw_train.empty()) throw ArgumentError("empty train corpus: " + train_path);
    corpus.schema = fit_schema(spec, raw_train, opt.context_min_count);

    // Two passes: collect token lists first, then encode once the vocabulary
    // exists.
    std::vector<std::vector<std::string>> train_tokens;
    auto tokenize_split = [&](const std::vector<RawDocument>& raw, const std::string& which,
                              std::vector<std::vector<std::string>>& tokens_out,
                              std::vector<Document>& docs_out) {
        for (std::size_t i = 0; i < raw.size(); ++i) {
            std::vector<std::string> toks = preprocess(raw[i].text, opt.unit, opt.truncate_cap);
            if (toks.empty()) {
                if (warnings)
                    warnings->push_back(which + ": document " + std::to_string(i) +
                                        " empty after preprocessing, skipped");
                continue;
            }
            Document d;
            d.text = raw[i].text;
            d.value = to_context_value(corpus.schema, raw[i].context);
            tokens_out.push_back(std::move(toks));
            docs_out.push_back(std::move(d));
        }
    };

    std::vector<std::vector<std::string>> dev_tokens, test_tokens;
    tokenize_split(raw_train, "train", train_tokens, corpus.train);
    if (!dev_path.empty()) {
        std::vector<RawDocument> raw_dev = load_jsonl_raw(dev_path, opt.lenient, warnings);
        tokenize_split(raw_dev, "dev", dev_tokens, corpus.dev);
    }
    if (!test_path.empty()) {
        std::vector<RawDocument> raw_test = load_jsonl_raw(test_path, opt.lenient, warnings);
        tokenize_split(raw_test, "test", test_tokens, corpus.test);
    }
    if (corpus.train.empty()) throw ArgumentError("train corpus has no usable documents");

    corpus.vocab = build_vocab(train_tokens, opt.unit, opt.vocab_min_count, opt.vocab_cap);
    for (std::size_t i = 0; i < corpus.train.size(); ++i)
        corpus.train[i].ids = corpus.vocab.encode(train_tokens[i]);
    for (std::size_t i = 0; i < corpus.dev.size(); ++i)
        corpus.dev[i].ids = corpus.vocab.encode(dev_tokens[i]);
    for (std::size_t i = 0; i < corpus.test.size(); ++i)
        corpus.test[i].ids = corpus.vocab.encode(test_tokens[i]);
    return corpus;
}

struct Batch {
    std::vector<std::vector<int>> ids;  // rows padded to equal length with kPad
    std::vector<std::size_t> lengths;   // true framed lengths
    std::vector<ContextValue> values;

    std::size_t rows() const { return ids.size(); }
    std::size_t padded_len() const { return ids.empty() ? 0 : ids[0].size(); }
    // Number of predicted (loss-bearing) positions.
    std::size_t token_count() const {
        std::size_t n = 0;
        for (std::size_t len : lengths) n += len - 1;
        return n;
    }
};

// Length-bucketed batches: seeded shuffle, stable sort by length, chunk,
// then shuffle chunk order. Deterministic for a fixed seed.
inline std::vector<Batch> make_batches(const std::vector<Document>& docs, std::size_t batch_size,
                                       std::uint64_t seed) {
    if (batch_size == 0) throw ArgumentError("make_batches: batch_size must be positive");
    std::vector<std::size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return docs[a].ids.size() < docs[b].ids.size();
    });

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        Batch batch;
        std::size_t maxlen = 0;
        for (std::size_t i = start; i < end; ++i)
            maxlen = std::max(maxlen, docs[order[i]].ids.size());
        for (std::size_t i = start; i < end; ++i) {
            const Document& d = docs[order[i]];
            std::vector<int> row = d.ids;
            row.resize(maxlen, Vocabulary::kPad);
            batch.ids.push_back(std::move(row));
            batch.lengths.push_back(d.ids.size());
            batch.values.push_back(d.value);
        }
        batches.push_back(std::move(batch));
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

}  // namespace ctxlm
