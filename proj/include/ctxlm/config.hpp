#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/training.hpp"

namespace ctxlm {

// Flat `key = value` configuration covering the model, training and corpus
// settings plus the context-variable declaration. `vocab_size` acts as a
// cap on the built vocabulary (0 keeps every token above vocab_min_count);
// the model's actual vocabulary size is derived from the corpus.
struct FullConfig {
    ModelConfig model;
    TrainConfig train;
    SchemaSpec schema_spec;
    CorpusOptions corpus;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

}  // namespace detail

inline void apply_config_entry(FullConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_uint;
    if (key == "variant") {
        if (value == "unadapted") cfg.model.variant = Variant::Unadapted;
        else if (value == "softmax_bias") cfg.model.variant = Variant::SoftmaxBias;
        else if (value == "concat_cell") cfg.model.variant = Variant::ConcatCell;
        else if (value == "factor_cell") cfg.model.variant = Variant::FactorCell;
        else throw ConfigError("variant: unknown value '" + value + "'");
    } else if (key == "unit") {
        if (value == "word") cfg.model.unit = Unit::Word;
        else if (value == "char" || value == "character") cfg.model.unit = Unit::Character;
        else throw ConfigError("unit: expected word or char, got '" + value + "'");
        cfg.corpus.unit = cfg.model.unit;
    } else if (key == "softmax_bias_mode") {
        if (value == "off") cfg.model.bias_mode = BiasMode::Off;
        else if (value == "one_hot") cfg.model.bias_mode = BiasMode::OneHot;
        else if (value == "projected") cfg.model.bias_mode = BiasMode::Projected;
        else throw ConfigError("softmax_bias_mode: unknown value '" + value + "'");
    } else if (key == "embedding_dim") {
        cfg.model.embedding_dim = parse_uint(value, key);
    } else if (key == "recurrent_dim") {
        cfg.model.recurrent_dim = parse_uint(value, key);
    } else if (key == "context_dim") {
        cfg.model.context_dim = parse_uint(value, key);
    } else if (key == "rank") {
        cfg.model.rank = parse_uint(value, key);
    } else if (key == "encoder_hidden_dim") {
        cfg.model.encoder_hidden_dim = parse_uint(value, key);
    } else if (key == "encoder_bias") {
        cfg.model.encoder_bias = parse_bool(value, key);
    } else if (key == "onehot_threshold") {
        cfg.model.onehot_threshold = parse_uint(value, key);
    } else if (key == "vocab_size") {
        cfg.corpus.vocab_cap = parse_uint(value, key);
    } else if (key == "vocab_min_count") {
        cfg.corpus.vocab_min_count = std::int64_t(parse_uint(value, key));
    } else if (key == "max_tokens") {
        cfg.corpus.truncate_cap = parse_uint(value, key);
    } else if (key == "context_min_count") {
        cfg.corpus.context_min_count = std::int64_t(parse_uint(value, key));
    } else if (key == "context_vars") {
        cfg.schema_spec.variables.clear();
        std::istringstream iss(value);
        std::string item;
        while (std::getline(iss, item, ',')) {
            item = detail::trim(item);
            if (item.empty()) continue;
            const std::size_t colon = item.find(':');
            if (colon == std::string::npos)
                throw ConfigError("context_vars: expected name:kind, got '" + item + "'");
            const std::string name = detail::trim(item.substr(0, colon));
            const std::string kind = detail::trim(item.substr(colon + 1));
            if (kind == "cat" || kind == "categorical")
                cfg.schema_spec.variables.push_back({name, VarKind::Categorical});
            else if (kind == "num" || kind == "numeric")
                cfg.schema_spec.variables.push_back({name, VarKind::Numeric});
            else
                throw ConfigError("context_vars: kind must be cat or num, got '" + kind + "'");
        }
    } else if (key == "learning_rate") {
        cfg.train.learning_rate = parse_double(value, key);
    } else if (key == "adam_beta1") {
        cfg.train.adam_beta1 = parse_double(value, key);
    } else if (key == "adam_beta2") {
        cfg.train.adam_beta2 = parse_double(value, key);
    } else if (key == "adam_epsilon") {
        cfg.train.adam_epsilon = parse_double(value, key);
    } else if (key == "batch_size") {
        cfg.train.batch_size = parse_uint(value, key);
    } else if (key == "max_steps") {
        cfg.train.max_steps = parse_uint(value, key);
    } else if (key == "keep_prob") {
        cfg.train.keep_prob = parse_double(value, key);
    } else if (key == "dropout_per_step") {
        cfg.train.dropout_per_step = parse_bool(value, key);
    } else if (key == "softmax_samples") {
        cfg.train.softmax_samples = parse_uint(value, key);
    } else if (key == "clip_norm") {
        cfg.train.clip_norm = parse_double(value, key);
    } else if (key == "seed") {
        cfg.train.seed = parse_uint(value, key);
    } else if (key == "precision") {
        cfg.train.precision = int(parse_uint(value, key));
    } else if (key == "eval_interval") {
        cfg.train.eval_interval = parse_uint(value, key);
        if (cfg.train.eval_interval == 0) throw ConfigError("eval_interval must be positive");
    } else if (key == "lenient") {
        cfg.corpus.lenient = parse_bool(value, key);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

// `key = value` or `key=value`; blank lines and '#' comments ignored.
inline void apply_config_line(FullConfig& cfg, const std::string& line,
                              const std::string& where = "") {
    std::string s = line;
    const std::size_t hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) return;
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos)
        throw ConfigError(where + "expected key = value, got '" + s + "'");
    apply_config_entry(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
}

inline FullConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    FullConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        try {
            apply_config_line(cfg, line, path + ":" + std::to_string(lineno) + ": ");
        } catch (const ConfigError& err) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + err.what());
        }
    }
    return cfg;
}

}  // namespace ctxlm
