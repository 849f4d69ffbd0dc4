#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "yoga/graph.hpp"
#include "yoga/tensor.hpp"

namespace yoga {

// Weight file: magic "YOGW", u32 version, u64 config hash, u32 tensor count,
// then per tensor: u16 name length, name bytes, u8 dtype (0 = f32), 4xu32
// shape, little-endian f32 payload. Learnable parameters come first, then
// state buffers (BN running statistics), both in graph order.

inline constexpr uint32_t kWeightFileVersion = 1;

namespace detail {
inline void put_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
inline uint16_t get_u16(std::istream& is, const std::string& what) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2))
        throw LoadError("weights: unexpected end of file while reading " + what);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
inline void put_u64(std::ostream& os, uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw LoadError("weights: unexpected end of file while reading " + what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}
}  // namespace detail

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> weight_table(ModelGraph<T>& g) {
    std::vector<std::pair<std::string, Tensor<T>*>> table;
    g.visit_params([&](const std::string& n, Tensor<T>& t) { table.emplace_back(n, &t); });
    g.visit_state([&](const std::string& n, Tensor<T>& t) { table.emplace_back(n, &t); });
    return table;
}

template <typename T>
void save_weights(ModelGraph<T>& g, std::ostream& os) {
    auto table = weight_table(g);
    os.write("YOGW", 4);
    detail::put_u32(os, kWeightFileVersion);
    detail::put_u64(os, g.config_hash());
    detail::put_u32(os, static_cast<uint32_t>(table.size()));
    for (auto& [name, t] : table) {
        detail::put_u16(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(0);  // dtype f32
        detail::put_u32(os, static_cast<uint32_t>(t->shape.n));
        detail::put_u32(os, static_cast<uint32_t>(t->shape.c));
        detail::put_u32(os, static_cast<uint32_t>(t->shape.h));
        detail::put_u32(os, static_cast<uint32_t>(t->shape.w));
        for (T v : t->data) detail::put_f32(os, static_cast<float>(v));
    }
}

template <typename T>
void save_weights(ModelGraph<T>& g, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("weights: cannot open '" + path + "' for writing");
    save_weights(g, os);
}

// Loads into an already-built graph. A config-hash mismatch is reported via
// the first tensor whose name or shape disagrees; if the table happens to
// match anyway, the hash itself is reported.
template <typename T>
void load_weights(ModelGraph<T>& g, std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "YOGW", 4) != 0)
        throw LoadError("weights: bad magic (not a YOGW file)");
    const uint32_t version = detail::get_u32(is, "version");
    if (version != kWeightFileVersion)
        throw LoadError("weights: unsupported version " + std::to_string(version));
    const uint64_t hash = detail::get_u64(is, "config hash");
    const bool hash_ok = hash == g.config_hash();
    const uint32_t count = detail::get_u32(is, "tensor count");
    auto table = weight_table(g);
    const size_t scan = std::min<size_t>(count, table.size());
    for (size_t ti = 0; ti < scan; ++ti) {
        auto& [name, t] = table[ti];
        const uint16_t len = detail::get_u16(is, "name of tensor '" + name + "'");
        std::string fname(len, '\0');
        if (!is.read(fname.data(), len))
            throw LoadError("weights: unexpected end of file while reading tensor '" + name + "'");
        if (fname != name)
            throw LoadError("weights: tensor name mismatch, file has '" + fname +
                            "', model expects '" + name + "'" +
                            (hash_ok ? "" : " (config hash mismatch)"));
        char dtype = 0;
        is.get(dtype);
        if (dtype != 0) throw LoadError("weights: tensor '" + name + "' has unsupported dtype");
        Shape s;
        s.n = detail::get_u32(is, ("shape of '" + name + "'").c_str());
        s.c = detail::get_u32(is, ("shape of '" + name + "'").c_str());
        s.h = detail::get_u32(is, ("shape of '" + name + "'").c_str());
        s.w = detail::get_u32(is, ("shape of '" + name + "'").c_str());
        if (s != t->shape)
            throw LoadError("weights: tensor '" + name + "' has shape " + s.str() +
                            ", model expects " + t->shape.str() +
                            (hash_ok ? "" : " (config hash mismatch)"));
        for (auto& v : t->data)
            v = static_cast<T>(detail::get_f32(is, ("payload of '" + name + "'").c_str()));
    }
    if (count != table.size())
        throw LoadError("weights: file has " + std::to_string(count) + " tensors, model expects " +
                        std::to_string(table.size()) +
                        (hash_ok ? "" : " (config hash mismatch)"));
    if (!hash_ok)
        throw LoadError("weights: config hash mismatch (all tensor shapes agree; file built from a "
                        "different config revision)");
}

template <typename T>
void load_weights(ModelGraph<T>& g, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("weights: cannot open '" + path + "'");
    load_weights(g, is);
}

}  // namespace yoga
