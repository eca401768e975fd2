#pragma once

// Little-endian stream helpers shared by the checkpoint formats.

#include "adaptivek/common.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>

namespace adaptivek::detail {

template <typename U>
void put_le(std::ostream& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& in) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int ch = in.get();
        if (ch == std::char_traits<char>::eof()) throw FormatError("truncated binary file");
        v |= static_cast<U>(static_cast<unsigned char>(ch)) << (8 * i);
    }
    return v;
}

inline void put_f32(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline double get_f32(std::istream& in) { return std::bit_cast<float>(get_le<std::uint32_t>(in)); }
inline void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

} // namespace adaptivek::detail
