#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

// Checkpoint file layout (all integers little-endian):
//   magic "CTXLMCKP", u32 version
//   config block: variant, bias_mode, unit, encoder_bias (u8 each);
//     vocab_size, embedding_dim, recurrent_dim, context_dim, rank,
//     encoder_hidden_dim, onehot_threshold (u64 each); gate-order string
//   context schema, vocabulary (with train counts)
//   named float arrays: name, dtype (4|8), rank, extents, payload bytes
// Round-trips are bit-exact for the stored precision; loading a float32
// checkpoint at double precision widens exactly.

namespace ckpt {

constexpr char kMagic[8] = {'C', 'T', 'X', 'L', 'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw IoError("cannot open " + path + " for writing");
    }

    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { uint(v, 4); }
    void u64(std::uint64_t v) { uint(v, 8); }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(std::uint32_t(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }

    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failure on " + path_);
    }

private:
    void uint(std::uint64_t v, int bytes) {
        unsigned char buf[8];
        for (int i = 0; i < bytes; ++i) buf[i] = (v >> (8 * i)) & 0xFF;
        raw(buf, bytes);
    }
    std::ofstream out_;
    std::string path_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path);
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::uint8_t u8() { return std::uint8_t(uint(1)); }
    std::uint32_t u32() { return std::uint32_t(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void raw(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(path_ + ": " + what + " at offset " + std::to_string(pos_));
    }

private:
    std::uint64_t uint(int bytes) {
        need(std::size_t(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i)
            v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += std::size_t(bytes);
        return v;
    }
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size())
            throw FormatError(path_ + ": truncated file, needed " + std::to_string(n) +
                              " bytes at offset " + std::to_string(pos_));
    }
    std::string path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

template <typename S>
void write_array(Writer& w, const char* name, const Tensor<S>& t) {
    w.str(name);
    w.u8(std::uint8_t(sizeof(S)));
    w.u8(std::uint8_t(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) w.u64(t.extent(i));
    w.u64(std::uint64_t(t.size() * sizeof(S)));
    w.raw(t.data(), t.size() * sizeof(S));
}

template <typename S>
void read_array_payload(Reader& r, Tensor<S>& t, std::uint8_t dtype, std::uint64_t bytes) {
    if (bytes != t.size() * std::size_t(dtype)) r.fail("array payload size mismatch");
    if (dtype == sizeof(S)) {
        r.raw(t.data(), bytes);
    } else if (dtype == 4) {
        std::vector<float> tmp(t.size());
        r.raw(tmp.data(), bytes);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = S(tmp[i]);
    } else if (dtype == 8) {
        std::vector<double> tmp(t.size());
        r.raw(tmp.data(), bytes);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = S(tmp[i]);
    } else {
        r.fail("unknown array dtype " + std::to_string(dtype));
    }
}

}  // namespace ckpt

template <typename S>
void save_checkpoint(const ModelParams<S>& params, const ModelConfig& cfg,
                     const ContextSchema& schema, const Vocabulary& vocab,
                     const std::string& path) {
    ckpt::Writer w(path);
    w.raw(ckpt::kMagic, 8);
    w.u32(ckpt::kVersion);

    w.u8(std::uint8_t(cfg.variant));
    w.u8(std::uint8_t(cfg.bias_mode));
    w.u8(std::uint8_t(cfg.unit));
    w.u8(cfg.encoder_bias ? 1 : 0);
    w.u64(cfg.vocab_size);
    w.u64(cfg.embedding_dim);
    w.u64(cfg.recurrent_dim);
    w.u64(cfg.context_dim);
    w.u64(cfg.rank);
    w.u64(cfg.encoder_hidden_dim);
    w.u64(cfg.onehot_threshold);
    w.str("ifo");  // gate block order within the 3d axis

    w.u32(std::uint32_t(schema.variables.size()));
    for (const ContextVar& var : schema.variables) {
        w.str(var.name);
        w.u8(std::uint8_t(var.kind));
        if (var.kind == VarKind::Categorical) {
            w.u64(var.cardinality);
            w.u32(std::uint32_t(var.categories.size()));
            for (const std::string& c : var.categories) w.str(c);
        } else {
            w.f64(var.mean);
            w.f64(var.stddev);
        }
    }

    w.u8(std::uint8_t(vocab.unit));
    w.u64(vocab.id_to_token.size());
    for (const std::string& t : vocab.id_to_token) w.str(t);
    for (std::int64_t c : vocab.counts) w.u64(std::uint64_t(c));

    std::uint32_t count = 0;
    params.for_each([&](const char*, const Tensor<S>&) { ++count; });
    w.u32(count);
    params.for_each([&](const char* name, const Tensor<S>& t) { ckpt::write_array(w, name, t); });
    w.finish();
}

template <typename S>
struct Checkpoint {
    ModelConfig config;
    ContextSchema schema;
    Vocabulary vocab;
    ModelParams<S> params;
    std::uint8_t stored_dtype = 0;  // bytes per scalar as trained (4 or 8)
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
    ckpt::Reader r(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, ckpt::kMagic, 8) != 0) r.fail("bad magic, not a checkpoint");
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(ckpt::kVersion) + ")");

    Checkpoint<S> out;
    ModelConfig& cfg = out.config;
    cfg.variant = Variant(r.u8());
    cfg.bias_mode = BiasMode(r.u8());
    cfg.unit = Unit(r.u8());
    cfg.encoder_bias = r.u8() != 0;
    cfg.vocab_size = r.u64();
    cfg.embedding_dim = r.u64();
    cfg.recurrent_dim = r.u64();
    cfg.context_dim = r.u64();
    cfg.rank = r.u64();
    cfg.encoder_hidden_dim = r.u64();
    cfg.onehot_threshold = r.u64();
    if (r.str() != "ifo") r.fail("unsupported gate order");

    const std::uint32_t nvars = r.u32();
    for (std::uint32_t i = 0; i < nvars; ++i) {
        ContextVar var;
        var.name = r.str();
        var.kind = VarKind(r.u8());
        if (var.kind == VarKind::Categorical) {
            var.cardinality = r.u64();
            const std::uint32_t ncats = r.u32();
            for (std::uint32_t j = 0; j < ncats; ++j) var.categories.push_back(r.str());
            if (var.cardinality != var.categories.size() + 1) r.fail("schema cardinality mismatch");
        } else {
            var.mean = r.f64();
            var.stddev = r.f64();
        }
        out.schema.variables.push_back(std::move(var));
    }
    out.schema.validate();

    out.vocab.unit = Unit(r.u8());
    const std::uint64_t ntok = r.u64();
    out.vocab.id_to_token.clear();
    out.vocab.counts.clear();
    for (std::uint64_t i = 0; i < ntok; ++i) out.vocab.id_to_token.push_back(r.str());
    for (std::uint64_t i = 0; i < ntok; ++i) out.vocab.counts.push_back(std::int64_t(r.u64()));
    out.vocab.rebuild_index();
    if (out.vocab.size() != cfg.vocab_size) r.fail("vocabulary size disagrees with config");

    out.params = allocate_params<S>(cfg, out.schema);
    const std::uint32_t narrays = r.u32();
    std::uint32_t expected = 0;
    out.params.for_each([&](const char*, const Tensor<S>&) { ++expected; });
    if (narrays != expected)
        r.fail("array count " + std::to_string(narrays) + " does not match configuration (" +
               std::to_string(expected) + ")");
    for (std::uint32_t i = 0; i < narrays; ++i) {
        const std::string name = r.str();
        const std::uint8_t dtype = r.u8();
        const std::uint8_t rank = r.u8();
        std::vector<std::size_t> extents;
        for (std::uint8_t j = 0; j < rank; ++j) extents.push_back(r.u64());
        const std::uint64_t bytes = r.u64();
        Tensor<S>* dst = out.params.find(name);
        if (!dst) r.fail("unexpected array '" + name + "'");
        if (dst->shape() != extents)
            r.fail("array '" + name + "' has shape mismatch with configuration");
        ckpt::read_array_payload(r, *dst, dtype, bytes);
        if (out.stored_dtype == 0) out.stored_dtype = dtype;
    }
    if (!r.at_end()) r.fail("trailing bytes after checkpoint payload");
    return out;
}

}  // namespace ctxlm
