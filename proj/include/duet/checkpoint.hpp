#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "duet/error.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Binary parameter snapshot. Layout, all little-endian:
///   magic "OKAF" | version u32 | count u64
///   then per record: name-length u32 | name bytes | rank u32 | dims u64[rank]
///   | payload f64[numel]
/// Records are written in name order so equal parameter sets produce equal
/// bytes.
namespace ckpt {

constexpr char kMagic[4] = {'O', 'K', 'A', 'F'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_le(os, bits);
}

inline double get_f64(std::istream& is) {
    std::uint64_t bits = get_le<std::uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline void save(const std::string& path, const std::map<std::string, Tensor>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    detail::put_le(os, kVersion);
    detail::put_le(os, static_cast<std::uint64_t>(params.size()));
    for (const auto& [name, t] : params) {
        detail::put_le(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le(os, static_cast<std::uint32_t>(t.shape().size()));
        for (auto d : t.shape()) detail::put_le(os, static_cast<std::uint64_t>(d));
        for (double v : t.data()) detail::put_f64(os, v);
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint64_t>(is);
    std::map<std::string, Tensor> out;
    for (std::uint64_t r = 0; r < count; ++r) {
        const auto name_len = detail::get_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("checkpoint: truncated name record");
        const auto rank = detail::get_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::int64_t>(detail::get_le<std::uint64_t>(is));
        const auto n = shape_numel(shape);
        std::vector<double> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = detail::get_f64(is);
        if (!out.emplace(name, Tensor::from_data(std::move(shape), std::move(data))).second)
            throw IoError("checkpoint: duplicate parameter " + name);
    }
    return out;
}

}  // namespace ckpt
}  // namespace duet
