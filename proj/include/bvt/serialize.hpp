#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "bvt/tensor.hpp"

// Flat tensor binary: 8-byte magic "BVTTENS0", u32 rank, u32 extents,
// little-endian f64 values in row-major order.

namespace bvt {

inline constexpr std::array<char, 8> kTensorMagic = {'B', 'V', 'T', 'T', 'E', 'N', 'S', '0'};

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("truncated ") + what);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    read_exact(is, reinterpret_cast<char*>(b), 4, "u32 field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    read_exact(is, reinterpret_cast<char*>(b), 8, "u64 field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace io

template <class Real>
void write_tensor(std::ostream& os, const TensorT<Real>& t) {
    os.write(kTensorMagic.data(), kTensorMagic.size());
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::put_u32(os, static_cast<std::uint32_t>(e));
    for (Real v : t.values()) io::put_f64(os, static_cast<double>(v));
}

template <class Real = double>
TensorT<Real> read_tensor(std::istream& is) {
    std::array<char, 8> magic{};
    io::read_exact(is, magic.data(), magic.size(), "tensor magic");
    if (magic != kTensorMagic) throw FormatError("bad tensor magic");
    const std::uint32_t rank = io::get_u32(is);
    if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
        e = io::get_u32(is);
        if (e == 0) throw FormatError("zero extent in tensor header");
    }
    std::vector<Real> data(numel_of(shape));
    for (auto& v : data) v = static_cast<Real>(io::get_f64(is));
    return TensorT<Real>(std::move(shape), std::move(data));
}

}  // namespace bvt
