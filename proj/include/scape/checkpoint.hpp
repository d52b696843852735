#pragma once

// Little-endian binary checkpoints: magic "SCPE", format version, a config
// hash that binds the weights to the producing configuration, the config
// block itself, then a table of (name, shape, f64 data) entries. Round-trips
// are byte-exact because values are stored as raw IEEE-754 bits.

#include "scape/model.hpp"
#include "scape/util.hpp"

#include <cstring>
#include <string>

namespace scape {

namespace ckpt_detail {

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }

inline void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace ckpt_detail

inline std::string serialize_model_config(const ModelConfig& c) {
    using namespace ckpt_detail;
    std::string out;
    put_i32(out, c.image_size);
    put_i32(out, c.patch_size);
    put_i32(out, c.d_model);
    put_i32(out, c.n_heads);
    put_i32(out, c.n_gkp_layers);
    put_i32(out, c.n_interactor_layers);
    put_i32(out, c.k_max);
    put_i32(out, c.n_filters);
    put_i32(out, c.af_hidden);
    put_i32(out, c.ffn_hidden);
    put_i32(out, c.head_hidden);
    put_f64(out, c.token_sigma);
    put_f64(out, c.dropout_p);
    put_u8(out, c.gkp_query_ctx ? 1 : 0);
    put_u8(out, c.use_identifiers ? 1 : 0);
    put_u8(out, static_cast<uint8_t>(c.variant));
    put_u64(out, c.init_seed);
    return out;
}

inline ModelConfig deserialize_model_config(ckpt_detail::Reader& r) {
    ModelConfig c;
    c.image_size = r.i32();
    c.patch_size = r.i32();
    c.d_model = r.i32();
    c.n_heads = r.i32();
    c.n_gkp_layers = r.i32();
    c.n_interactor_layers = r.i32();
    c.k_max = r.i32();
    c.n_filters = r.i32();
    c.af_hidden = r.i32();
    c.ffn_hidden = r.i32();
    c.head_hidden = r.i32();
    c.token_sigma = r.f64();
    c.dropout_p = r.f64();
    c.gkp_query_ctx = r.u8() != 0;
    c.use_identifiers = r.u8() != 0;
    c.variant = static_cast<Variant>(r.u8());
    c.init_seed = r.u64();
    return c;
}

inline uint64_t config_hash(const ModelConfig& c) {
    const std::string bytes = serialize_model_config(c);
    return fnv1a(bytes.data(), bytes.size());
}

inline std::string checkpoint_bytes(const Model& m) {
    using namespace ckpt_detail;
    std::string out = "SCPE";
    put_u32(out, 1); // format version
    put_u64(out, config_hash(m.cfg));
    const std::string cfg = serialize_model_config(m.cfg);
    put_u32(out, static_cast<uint32_t>(cfg.size()));
    out += cfg;
    put_u32(out, static_cast<uint32_t>(m.reg.params.size()));
    for (const auto& [name, t] : m.reg.params) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<uint32_t>(t.shape().size()));
        for (int dim : t.shape()) put_i32(out, dim);
        for (double v : t.data()) put_f64(out, v);
    }
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
    write_file(path, checkpoint_bytes(m));
}

// Reads the header only; used to check hash binding before paying for a load.
inline uint64_t checkpoint_config_hash(const std::string& bytes) {
    ckpt_detail::Reader r(bytes);
    if (r.bytes(4) != "SCPE") throw std::runtime_error("checkpoint: bad magic");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    return r.u64();
}

inline Model load_checkpoint_bytes(const std::string& bytes) {
    ckpt_detail::Reader r(bytes);
    if (r.bytes(4) != "SCPE") throw std::runtime_error("checkpoint: bad magic");
    const uint32_t version = r.u32();
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const uint64_t stored_hash = r.u64();
    const uint32_t cfg_len = r.u32();
    const size_t cfg_start = r.pos;
    ModelConfig cfg = deserialize_model_config(r);
    if (r.pos - cfg_start != cfg_len) throw std::runtime_error("checkpoint: config block length mismatch");
    if (config_hash(cfg) != stored_hash) throw std::runtime_error("checkpoint: config hash mismatch");

    Model m(cfg);
    const uint32_t n = r.u32();
    if (n != m.reg.params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    for (auto& [name, t] : m.reg.params) {
        const uint32_t name_len = r.u32();
        const std::string stored_name = r.bytes(name_len);
        if (stored_name != name)
            throw std::runtime_error("checkpoint: parameter order mismatch at " + stored_name);
        const uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (uint32_t i = 0; i < ndim; ++i) shape[i] = r.i32();
        if (shape != t.shape()) throw std::runtime_error("checkpoint: shape mismatch at " + name);
        for (double& v : t.data()) v = r.f64();
    }
    if (r.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
    return m;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    return load_checkpoint_bytes(read_file(path));
}

} // namespace scape
