#pragma once

// Basic value types shared across the library: dense 2D grids, 8-bit RGB
// images, deterministic RNG, and small filesystem helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace affgro {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Transient backend failure (network, process). Distinct from "no detection".
struct BackendUnavailable : Error {
    explicit BackendUnavailable(const std::string& msg) : Error(msg) {}
};

template <typename T>
struct Grid {
    std::size_t h{0}, w{0};
    std::vector<T> v;

    Grid() = default;
    Grid(std::size_t h_, std::size_t w_, T fill = T{}) : h(h_), w(w_), v(h_ * w_, fill) {}

    T& at(std::size_t i, std::size_t j) { return v[i * w + j]; }
    const T& at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
    std::size_t size() const { return v.size(); }
    bool same_shape(const Grid& o) const { return h == o.h && w == o.w; }

    bool operator==(const Grid& o) const { return h == o.h && w == o.w && v == o.v; }
};

using MaskGrid = Grid<std::uint8_t>;  // values 0/1
using RealGrid = Grid<double>;

inline double grid_sum(const RealGrid& g) {
    double s = 0.0;
    for (double x : g.v) s += x;
    return s;
}

inline std::size_t mask_area(const MaskGrid& m) {
    std::size_t n = 0;
    for (auto b : m.v) n += (b != 0);
    return n;
}

// Interleaved 8-bit RGB.
struct Image {
    std::size_t h{0}, w{0};
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(std::size_t h_, std::size_t w_) : h(h_), w(w_), rgb(h_ * w_ * 3, 0) {}

    std::uint8_t* px(std::size_t i, std::size_t j) { return rgb.data() + (i * w + j) * 3; }
    const std::uint8_t* px(std::size_t i, std::size_t j) const { return rgb.data() + (i * w + j) * 3; }

    bool operator==(const Image& o) const { return h == o.h && w == o.w && rgb == o.rgb; }
};

// Deterministic RNG. mt19937_64's output sequence is fully specified by the
// standard; the derived draws below avoid std:: distributions, whose results
// vary between standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform in {0, ..., n-1}
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw Error("uniform_index: n must be positive");
        return static_cast<std::size_t>(eng_() % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& xs) {
        for (std::size_t i = xs.size(); i > 1; --i) {
            const std::size_t j = uniform_index(i);
            std::swap(xs[i - 1], xs[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_{false};
    double spare_{0.0};
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t x) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
    return std::string(buf);
}

// Round-trippable double formatting, used everywhere a float lands in a text
// artifact so that re-parsing reproduces the exact value.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
}

// All artifact writes go through a temp file + rename so an interrupted run
// never leaves a half-written file behind.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace affgro
