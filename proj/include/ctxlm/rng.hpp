#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ctxlm {

// All randomness in the library flows from one master seed through named
// substreams (init, dropout, batch, sample, gen). Streams are independent
// mt19937_64 engines keyed by FNV-1a of the stream name mixed with the
// seed, so adding a consumer never perturbs the draws of another.

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t z) {
    // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class SeedStreams {
public:
    explicit SeedStreams(std::uint64_t seed) : seed_(seed) {}

    std::mt19937_64 stream(std::string_view name, std::uint64_t salt = 0) const {
        return std::mt19937_64(mix64(seed_ ^ mix64(fnv1a(name) + salt)));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
};

}  // namespace ctxlm
