#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "teocc/tensor.hpp"

namespace teocc {

// Binary tensor container. Layout:
//   magic "TEOC" | version u16 | dtype u8 (0=f32, 1=i32) | rank u8 |
//   dims u32[rank] | payload, C order
// All integers and the payload are little-endian.
namespace teoc {

inline constexpr std::uint16_t kVersion = 1;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
    static constexpr std::uint8_t value = 0;
};
template <>
struct DtypeCode<std::int32_t> {
    static constexpr std::uint8_t value = 1;
};

// Payload values are 4-byte little-endian words; x86 and every target we care
// about is little-endian, but encode explicitly so files are portable.
template <typename T>
void put_payload(std::string& out, const Tensor<T>& t) {
    static_assert(sizeof(T) == 4);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        std::uint32_t w;
        std::memcpy(&w, &t[i], 4);
        put_u32(out, w);
    }
}

template <typename T>
void get_payload(const unsigned char* p, Tensor<T>& t) {
    static_assert(sizeof(T) == 4);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const std::uint32_t w = get_u32(p + 4 * i);
        std::memcpy(&t[i], &w, 4);
    }
}

}  // namespace detail

template <typename T>
std::string encode(const Tensor<T>& t) {
    std::string out = "TEOC";
    detail::put_u16(out, kVersion);
    out.push_back(static_cast<char>(detail::DtypeCode<T>::value));
    out.push_back(static_cast<char>(t.rank()));
    for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_payload(out, t);
    return out;
}

/// Decodes one tensor starting at `data + offset`. Advances `offset` past the
/// record. `name` is used in error messages only.
template <typename T>
Tensor<T> decode(const std::string& data, std::size_t& offset, const std::string& name) {
    const auto fail = [&](const std::string& why, std::size_t expected_bytes) {
        throw std::runtime_error("teoc: " + name + ": " + why + " (expected " +
                                 std::to_string(expected_bytes) + " bytes, have " +
                                 std::to_string(data.size() - offset) + ")");
    };
    const auto* base = reinterpret_cast<const unsigned char*>(data.data());
    if (data.size() - offset < 8) fail("truncated header", 8);
    if (std::memcmp(data.data() + offset, "TEOC", 4) != 0)
        throw std::runtime_error("teoc: " + name + ": bad magic bytes");
    const std::uint16_t version = detail::get_u16(base + offset + 4);
    if (version != kVersion)
        throw std::runtime_error("teoc: " + name + ": unsupported container version " +
                                 std::to_string(version));
    const std::uint8_t dtype = base[offset + 6];
    if (dtype != detail::DtypeCode<T>::value)
        throw std::runtime_error("teoc: " + name + ": dtype code " + std::to_string(dtype) +
                                 " does not match the requested element type");
    const int rank = base[offset + 7];
    std::size_t pos = offset + 8;
    if (data.size() - pos < static_cast<std::size_t>(4 * rank)) fail("truncated dims", 4u * rank);
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<int>(detail::get_u32(base + pos));
        numel *= shape[static_cast<std::size_t>(i)];
        pos += 4;
    }
    const std::size_t payload = static_cast<std::size_t>(numel) * 4;
    if (data.size() - pos < payload) fail("truncated payload", payload);
    Tensor<T> t(shape);
    detail::get_payload(base + pos, t);
    offset = pos + payload;
    return t;
}

template <typename T>
void write_file(const std::string& path, const Tensor<T>& t) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("teoc: cannot open " + path + " for writing");
    const std::string blob = encode(t);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("teoc: write failed for " + path);
}

inline std::string read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return data;
}

template <typename T>
Tensor<T> read_file(const std::string& path) {
    const std::string data = read_all(path);
    std::size_t offset = 0;
    Tensor<T> t = decode<T>(data, offset, path);
    if (offset != data.size())
        throw std::runtime_error("teoc: " + path + ": trailing bytes after tensor record");
    return t;
}

}  // namespace teoc
}  // namespace teocc
