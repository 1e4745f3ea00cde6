#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vkcc/tensor.hpp"

namespace vkcc {

namespace detail {

inline void ckpt_put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t ckpt_get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("checkpoint: truncated file");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline void ckpt_put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline double ckpt_get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw IoError("checkpoint: truncated file");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

constexpr char kCkptMagic[6] = {'C', 'C', 'K', 'P', '1', '\n'};

}  // namespace detail

/// One deserialized checkpoint entry.
struct CheckpointEntry {
    std::string name;
    std::vector<Eigen::Index> shape;
    std::vector<double> values;  ///< row-major flat payload
};

/// Writes named tensors in declaration order. Values are stored as IEEE-754
/// doubles, little-endian, so a double-precision model round-trips bit-exactly.
template <typename S>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorT<S>>>& params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open for writing: " + path);
    out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::ckpt_put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        if (name.empty()) throw InvalidInput("checkpoint: empty tensor name");
        detail::ckpt_put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::ckpt_put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (int d = 0; d < tensor.rank(); ++d)
            detail::ckpt_put_u32(out, static_cast<std::uint32_t>(tensor.extent(d)));
        const auto& v = tensor.value();
        for (Eigen::Index i = 0; i < v.size(); ++i) detail::ckpt_put_f64(out, double(v(i)));
    }
    if (!out) throw IoError("checkpoint: write failed: " + path);
}

/// Reads every entry of a checkpoint file.
inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open: " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, detail::kCkptMagic, 6) != 0)
        throw IoError("checkpoint: bad magic: " + path);
    const std::uint32_t count = detail::ckpt_get_u32(in);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        CheckpointEntry e;
        const std::uint32_t name_len = detail::ckpt_get_u32(in);
        if (name_len == 0 || name_len > 4096) throw IoError("checkpoint: bad name length");
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw IoError("checkpoint: truncated file");
        const std::uint32_t rank = detail::ckpt_get_u32(in);
        if (rank > 8) throw IoError("checkpoint: bad rank");
        std::size_t size = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t ext = detail::ckpt_get_u32(in);
            if (ext == 0 || size > (std::size_t(1) << 30) / ext)
                throw IoError("checkpoint: bad extent");
            e.shape.push_back(static_cast<Eigen::Index>(ext));
            size *= ext;
        }
        e.values.resize(size);
        for (std::size_t i = 0; i < size; ++i) e.values[i] = detail::ckpt_get_f64(in);
        entries.push_back(std::move(e));
    }
    return entries;
}

/// Loads a checkpoint into live tensors. Entries must match the given
/// parameter list exactly: same count, same names in the same order, same
/// shapes. Values are copied into the tensors in place.
template <typename S>
void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorT<S>>>& params) {
    const auto entries = read_checkpoint(path);
    if (entries.size() != params.size())
        throw InvalidInput("checkpoint: parameter count mismatch");
    for (std::size_t t = 0; t < entries.size(); ++t) {
        const auto& e = entries[t];
        const auto& [name, tensor] = params[t];
        if (e.name != name) throw InvalidInput("checkpoint: name mismatch at " + e.name);
        if (e.shape.size() != static_cast<std::size_t>(tensor.rank()))
            throw InvalidInput("checkpoint: rank mismatch at " + e.name);
        for (int d = 0; d < tensor.rank(); ++d)
            if (e.shape[static_cast<std::size_t>(d)] != tensor.extent(d))
                throw InvalidInput("checkpoint: shape mismatch at " + e.name);
        auto& v = tensor.ptr()->value;
        for (Eigen::Index i = 0; i < v.size(); ++i)
            v(i) = static_cast<S>(e.values[static_cast<std::size_t>(i)]);
    }
}

}  // namespace vkcc
