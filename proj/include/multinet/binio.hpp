#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "multinet/errors.hpp"

// Little-endian binary stream helpers for the dataset and checkpoint codecs.
namespace multinet::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms unsupported");

template <typename T>
inline T byteswap_if_be(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        T out;
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
    return v;
}

template <typename T>
inline void write_le(std::ostream& os, T v) {
    v = byteswap_if_be(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    write_le(os, bits);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    write_le(os, bits);
}

template <typename T>
inline bool read_le(std::istream& is, T& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) return false;
    v = byteswap_if_be(v);
    return true;
}

inline bool read_f64(std::istream& is, double& v) {
    std::uint64_t bits;
    if (!read_le(is, bits)) return false;
    std::memcpy(&v, &bits, sizeof(v));
    return true;
}

inline bool read_f32(std::istream& is, float& v) {
    std::uint32_t bits;
    if (!read_le(is, bits)) return false;
    std::memcpy(&v, &bits, sizeof(v));
    return true;
}

template <typename T>
inline T read_le_or_throw(std::istream& is, const std::string& what) {
    T v;
    if (!read_le(is, v)) throw IoError("unexpected end of file while reading " + what);
    return v;
}

} // namespace multinet::binio
