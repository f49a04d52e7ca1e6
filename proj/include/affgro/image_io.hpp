#pragma once

// Image file IO. Images are stored as binary PPM (color) and PGM (grayscale);
// both are trivially inspectable and need no external decoder. Binary masks
// use a small packed 1-bit format for the backend cache.

#include <cstdint>
#include <filesystem>
#include <sstream>

#include "affgro/core.hpp"

namespace affgro {

inline std::string encode_ppm(const Image& img) {
    std::ostringstream out;
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    return out.str();
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    atomic_write_file(path, encode_ppm(img));
}

namespace detail {

// Reads one whitespace-delimited token, skipping '#' comments.
inline std::string pnm_token(std::istringstream& in) {
    std::string tok;
    while (in >> tok) {
        if (tok[0] == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        return tok;
    }
    throw Error("truncated PNM header");
}

inline void pnm_header(std::istringstream& in, const std::string& magic, std::size_t& w, std::size_t& h) {
    const std::string m = pnm_token(in);
    if (m != magic) throw Error("bad PNM magic: expected " + magic + ", got " + m);
    w = std::stoul(pnm_token(in));
    h = std::stoul(pnm_token(in));
    const std::string maxv = pnm_token(in);
    if (maxv != "255") throw Error("unsupported PNM max value: " + maxv);
    in.get();  // single whitespace before raster
}

}  // namespace detail

inline Image read_ppm(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::size_t w = 0, h = 0;
    detail::pnm_header(in, "P6", w, h);
    Image img(h, w);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (static_cast<std::size_t>(in.gcount()) != img.rgb.size()) throw Error("truncated PPM raster: " + path.string());
    return img;
}

inline std::string encode_pgm(const Grid<std::uint8_t>& g) {
    std::ostringstream out;
    out << "P5\n" << g.w << " " << g.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(g.v.data()), static_cast<std::streamsize>(g.v.size()));
    return out.str();
}

inline void write_pgm(const std::filesystem::path& path, const Grid<std::uint8_t>& g) {
    atomic_write_file(path, encode_pgm(g));
}

inline Grid<std::uint8_t> read_pgm(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::size_t w = 0, h = 0;
    detail::pnm_header(in, "P5", w, h);
    Grid<std::uint8_t> g(h, w);
    in.read(reinterpret_cast<char*>(g.v.data()), static_cast<std::streamsize>(g.v.size()));
    if (static_cast<std::size_t>(in.gcount()) != g.v.size()) throw Error("truncated PGM raster: " + path.string());
    return g;
}

// Nonnegative grid -> 8-bit grayscale, scaled so the maximum maps to 255.
inline Grid<std::uint8_t> quantize_u8(const RealGrid& g) {
    double mx = 0.0;
    for (double x : g.v) mx = std::max(mx, x);
    Grid<std::uint8_t> out(g.h, g.w);
    if (mx <= 0.0) return out;
    for (std::size_t i = 0; i < g.size(); ++i)
        out.v[i] = static_cast<std::uint8_t>(std::lround(g.v[i] / mx * 255.0));
    return out;
}

// Packed 1-bit mask: "ABM1\n<w> <h>\n" + ceil(w*h/8) bytes, row-major, MSB first.
inline std::string encode_bitmask(const MaskGrid& m) {
    std::ostringstream out;
    out << "ABM1\n" << m.w << " " << m.h << "\n";
    const std::size_t nbytes = (m.size() + 7) / 8;
    std::string bytes(nbytes, '\0');
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.v[i]) bytes[i / 8] = static_cast<char>(bytes[i / 8] | (0x80 >> (i % 8)));
    out << bytes;
    return out.str();
}

inline void write_bitmask(const std::filesystem::path& path, const MaskGrid& m) {
    atomic_write_file(path, encode_bitmask(m));
}

inline MaskGrid read_bitmask(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    std::size_t w = 0, h = 0;
    in >> magic >> w >> h;
    if (magic != "ABM1") throw Error("bad bitmask magic in " + path.string());
    in.get();
    const std::size_t offset = static_cast<std::size_t>(in.tellg());
    MaskGrid m(h, w);
    const std::size_t nbytes = (m.size() + 7) / 8;
    if (bytes.size() < offset + nbytes) throw Error("truncated bitmask: " + path.string());
    for (std::size_t i = 0; i < m.size(); ++i)
        m.v[i] = (bytes[offset + i / 8] & (0x80 >> (i % 8))) ? 1 : 0;
    return m;
}

}  // namespace affgro
