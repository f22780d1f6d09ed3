#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "bvt/errors.hpp"

// Binary netpbm: P6 (RGB) and P5 (gray), 8-bit.

namespace bvt {

/// Planar image, values in [0, 1], layout [channels x height x width].
struct Image {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
};

/// 8-bit raster, row-major.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};

inline std::uint8_t quantize(double v) {
    if (!(v > 0)) return 0;
    if (v >= 1) return 255;
    return static_cast<std::uint8_t>(static_cast<int>(v * 255.0 + 0.5));
}

namespace detail {

inline std::size_t read_header_number(std::istream& is, const char* what) {
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    if (c == EOF || !std::isdigit(c)) throw FormatError(std::string("netpbm: missing ") + what);
    std::size_t v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + static_cast<std::size_t>(c - '0');
        if (v > (1u << 24)) throw FormatError(std::string("netpbm: implausible ") + what);
        c = is.get();
    }
    if (c == EOF || !std::isspace(c)) throw FormatError(std::string("netpbm: bad separator after ") + what);
    return v;
}

struct NetpbmHeader {
    std::size_t width, height, maxval;
};

inline NetpbmHeader read_netpbm_header(std::istream& is, const char* magic) {
    char m[2] = {0, 0};
    is.read(m, 2);
    if (is.gcount() != 2 || m[0] != magic[0] || m[1] != magic[1]) {
        throw FormatError(std::string("netpbm: bad magic, expected ") + magic);
    }
    NetpbmHeader h{};
    h.width = read_header_number(is, "width");
    h.height = read_header_number(is, "height");
    h.maxval = read_header_number(is, "maxval");
    if (h.width == 0 || h.height == 0) throw FormatError("netpbm: zero image extent");
    if (h.maxval == 0 || h.maxval > 255) throw FormatError("netpbm: only 8-bit maxval is supported");
    return h;
}

inline std::vector<std::uint8_t> read_payload(std::istream& is, std::size_t n) {
    std::vector<std::uint8_t> bytes(n);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("netpbm: truncated pixel data");
    return bytes;
}

}  // namespace detail

inline Image read_ppm(std::istream& is) {
    auto h = detail::read_netpbm_header(is, "P6");
    auto bytes = detail::read_payload(is, h.width * h.height * 3);
    Image img{3, h.height, h.width, std::vector<double>(bytes.size())};
    const double scale = static_cast<double>(h.maxval);
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = bytes[(y * h.width + x) * 3 + c] / scale;
    return img;
}

inline GrayImage read_pgm(std::istream& is) {
    auto h = detail::read_netpbm_header(is, "P5");
    GrayImage g{h.height, h.width, detail::read_payload(is, h.width * h.height)};
    return g;
}

/// Writes an RGB image; values are quantized to 8 bits (round half up).
inline void write_ppm(std::ostream& os, const Image& img) {
    if (img.channels != 3) throw DimensionError("write_ppm: image must have 3 channels");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> bytes(img.width * img.height * 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) bytes[(y * img.width + x) * 3 + c] = quantize(img.at(c, y, x));
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_pgm(std::ostream& os, const GrayImage& g) {
    os << "P5\n" << g.width << " " << g.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
}

inline Image load_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image " + path.string());
    return read_ppm(is);
}

inline GrayImage load_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image " + path.string());
    return read_pgm(is);
}

inline void save_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image " + path.string());
    write_ppm(os, img);
}

inline void save_pgm(const std::filesystem::path& path, const GrayImage& g) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image " + path.string());
    write_pgm(os, g);
}

}  // namespace bvt
