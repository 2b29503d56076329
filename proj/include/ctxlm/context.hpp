#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ctxlm/errors.hpp"
#include "ctxlm/tensor.hpp"

namespace ctxlm {

enum class VarKind : std::uint8_t { Categorical = 0, Numeric = 1 };

// Declaration of one context variable. Categorical variables reserve index 0
// as the rare/unknown bucket; values unseen when the dictionary was fitted
// map there. Numeric variables carry standardization statistics frozen from
// the training split.
struct ContextVar {
    std::string name;
    VarKind kind = VarKind::Categorical;

    // categorical: cardinality includes the reserved bucket; categories[i]
    // is the raw string for index i+1.
    std::size_t cardinality = 0;
    std::vector<std::string> categories;

    // numeric
    double mean = 0.0;
    double stddev = 1.0;

    std::size_t category_index(const std::string& raw) const {
        for (std::size_t i = 0; i < categories.size(); ++i)
            if (categories[i] == raw) return i + 1;
        return 0;  // rare/unknown bucket
    }
};

struct ContextSchema {
    std::vector<ContextVar> variables;

    void validate() const {
        for (std::size_t i = 0; i < variables.size(); ++i) {
            const ContextVar& v = variables[i];
            for (std::size_t j = i + 1; j < variables.size(); ++j)
                if (variables[j].name == v.name)
                    throw ConfigError("context schema: duplicate variable name '" + v.name + "'");
            if (v.kind == VarKind::Categorical && v.cardinality < 2)
                throw ConfigError("context schema: variable '" + v.name +
                                  "' needs cardinality >= 2");
            if (v.kind == VarKind::Numeric && !(v.stddev > 0))
                throw ConfigError("context schema: variable '" + v.name + "' needs stddev > 0");
        }
    }

    const ContextVar* find(const std::string& name) const {
        for (const ContextVar& v : variables)
            if (v.name == name) return &v;
        return nullptr;
    }

    // Width of the raw encoding: one one-hot block per categorical variable
    // plus one standardized scalar per numeric variable.
    std::size_t encoded_width() const {
        std::size_t w = 0;
        for (const ContextVar& v : variables)
            w += (v.kind == VarKind::Categorical) ? v.cardinality : 1;
        return w;
    }

    // Number of joint categorical classes (mixed-radix cross-product); used
    // by the one-hot softmax-bias mode.
    std::size_t class_count() const {
        std::size_t n = 1;
        for (const ContextVar& v : variables)
            if (v.kind == VarKind::Categorical) n *= v.cardinality;
        return n;
    }

    bool all_categorical() const {
        for (const ContextVar& v : variables)
            if (v.kind != VarKind::Categorical) return false;
        return !variables.empty();
    }
};

// One slot per schema variable: a category index, a raw numeric value, or
// missing (encoded as the expected value of the variable).
struct ContextSlot {
    enum class Tag : std::uint8_t { Category, Number, Missing } tag = Tag::Missing;
    std::size_t index = 0;
    double number = 0.0;

    static ContextSlot category(std::size_t idx) { return {Tag::Category, idx, 0.0}; }
    static ContextSlot numeric(double v) { return {Tag::Number, 0, v}; }
    static ContextSlot missing() { return {}; }

    bool operator==(const ContextSlot& o) const {
        if (tag != o.tag) return false;
        if (tag == Tag::Category) return index == o.index;
        if (tag == Tag::Number) return number == o.number;
        return true;
    }
};

struct ContextValue {
    std::vector<ContextSlot> slots;

    bool operator==(const ContextValue& o) const { return slots == o.slots; }
};

// One-hot blocks concatenated with standardized scalars. Missing slots take
// the expected value: a uniform mixture over the one-hot block, or 0 after
// standardization.
template <typename S = double>
Tensor<S> encode_raw(const ContextSchema& schema, const ContextValue& value) {
    if (value.slots.size() != schema.variables.size())
        throw EncodingError("context value has " + std::to_string(value.slots.size()) +
                            " slots, schema declares " +
                            std::to_string(schema.variables.size()));
    Tensor<S> raw({schema.encoded_width()});
    std::size_t pos = 0;
    for (std::size_t i = 0; i < schema.variables.size(); ++i) {
        const ContextVar& var = schema.variables[i];
        const ContextSlot& slot = value.slots[i];
        if (var.kind == VarKind::Categorical) {
            if (slot.tag == ContextSlot::Tag::Category) {
                if (slot.index >= var.cardinality)
                    throw EncodingError("variable '" + var.name + "': category index " +
                                        std::to_string(slot.index) + " out of range (cardinality " +
                                        std::to_string(var.cardinality) + ")");
                raw[pos + slot.index] = S(1);
            } else if (slot.tag == ContextSlot::Tag::Missing) {
                const S u = S(1) / S(var.cardinality);
                for (std::size_t j = 0; j < var.cardinality; ++j) raw[pos + j] = u;
            } else {
                throw EncodingError("variable '" + var.name + "': expected a category");
            }
            pos += var.cardinality;
        } else {
            if (slot.tag == ContextSlot::Tag::Number) {
                if (!std::isfinite(slot.number))
                    throw NumericError("variable '" + var.name + "': non-finite numeric value");
                raw[pos] = S((slot.number - var.mean) / var.stddev);
            } else if (slot.tag == ContextSlot::Tag::Missing) {
                raw[pos] = S(0);
            } else {
                throw EncodingError("variable '" + var.name + "': expected a number");
            }
            pos += 1;
        }
    }
    return raw;
}

// Mixed-radix index over the categorical variables, for the one-hot
// softmax-bias table. Missing categorical slots are not representable here.
inline std::size_t joint_class_index(const ContextSchema& schema, const ContextValue& value) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < schema.variables.size(); ++i) {
        const ContextVar& var = schema.variables[i];
        if (var.kind != VarKind::Categorical) continue;
        const ContextSlot& slot = value.slots[i];
        if (slot.tag != ContextSlot::Tag::Category)
            throw EncodingError("variable '" + var.name +
                                "': one-hot bias mode needs a concrete category");
        idx = idx * var.cardinality + slot.index;
    }
    return idx;
}

// Feed-forward encoder with one hidden ReLU layer and a linear output,
// mapping the raw encoding to the context embedding c.
template <typename S>
struct ContextEncoder {
    Tensor<S> w1;  // hidden x raw_width
    Tensor<S> b1;  // hidden
    Tensor<S> w2;  // k x hidden
    Tensor<S> b2;  // k

    bool empty() const { return w1.empty(); }
    std::size_t input_width() const { return w1.extent(1); }
    std::size_t hidden_dim() const { return w1.extent(0); }
    std::size_t output_dim() const { return w2.extent(0); }
};

template <typename S>
Tensor<S> embed_context(const ContextEncoder<S>& enc, const Tensor<S>& raw) {
    if (raw.rank() != 1 || raw.extent(0) != enc.input_width())
        throw DimensionError("embed_context: raw width " + raw.shape_str() + ", encoder expects (" +
                             std::to_string(enc.input_width()) + ")");
    Tensor<S> h = matvec(enc.w1, raw);
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (!enc.b1.empty()) h[i] += enc.b1[i];
        if (h[i] < S(0)) h[i] = S(0);
    }
    Tensor<S> c = matvec(enc.w2, h);
    if (!enc.b2.empty())
        for (std::size_t i = 0; i < c.size(); ++i) c[i] += enc.b2[i];
    return c;
}

}  // namespace ctxlm
