#pragma once

#include <stdexcept>
#include <string>

namespace ctxlm {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: usage/config -> 1, data/format -> 2, numeric -> 3.

struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct EncodingError : std::invalid_argument {
    explicit EncodingError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct VocabError : std::invalid_argument {
    explicit VocabError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ArgumentError : std::invalid_argument {
    explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CapabilityError : std::runtime_error {
    explicit CapabilityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ctxlm
