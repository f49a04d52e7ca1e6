#pragma once

// Heatmap labels and raster utilities: Gaussian blur, mask -> heatmap
// conversion, bilinear resize, flips.

#include <cmath>

#include "affgro/core.hpp"
#include "affgro/image_io.hpp"
#include "affgro/tensor.hpp"

namespace affgro {

// Nonnegative grid summing to 1. Holds pseudo labels, refined labels, model
// predictions and ground truth alike.
struct HeatmapLabel {
    RealGrid g;

    static HeatmapLabel normalized(RealGrid grid) {
        double s = 0.0;
        for (double x : grid.v) {
            if (x < 0.0) throw Error("heatmap: negative value");
            s += x;
        }
        if (s <= 0.0) throw Error("heatmap: zero mass");
        for (double& x : grid.v) x /= s;
        return HeatmapLabel{std::move(grid)};
    }

    bool valid(double tol = 1e-6) const {
        double s = 0.0;
        for (double x : g.v) {
            if (x < 0.0 || !std::isfinite(x)) return false;
            s += x;
        }
        return std::abs(s - 1.0) <= tol;
    }
};

inline void write_heatmap_pgm(const std::filesystem::path& path, const HeatmapLabel& hm) {
    write_pgm(path, quantize_u8(hm.g));
}

inline HeatmapLabel read_heatmap_pgm(const std::filesystem::path& path) {
    const auto u8 = read_pgm(path);
    RealGrid g(u8.h, u8.w);
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = static_cast<double>(u8.v[i]);
    return HeatmapLabel::normalized(std::move(g));
}

namespace detail {

// Symmetric (half-sample) reflection: ... 2 1 0 | 0 1 2 ... | n-1 n-1 ...
inline std::size_t reflect_index(long i, long n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return static_cast<std::size_t>(i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const long r = std::max<long>(1, std::lround(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0.0;
    for (long i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        s += k[static_cast<std::size_t>(i + r)];
    }
    for (double& x : k) x /= s;
    return k;
}

}  // namespace detail

// Separable Gaussian blur with reflective borders (preserves constants and
// total mass).
inline RealGrid gaussian_blur(const RealGrid& g, double sigma) {
    if (sigma <= 0.0) return g;
    const auto k = detail::gaussian_kernel(sigma);
    const long r = static_cast<long>(k.size() / 2);
    RealGrid tmp(g.h, g.w), out(g.h, g.w);
    for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j) {
            double acc = 0.0;
            for (long t = -r; t <= r; ++t)
                acc += k[static_cast<std::size_t>(t + r)] *
                       g.at(i, detail::reflect_index(static_cast<long>(j) + t, static_cast<long>(g.w)));
            tmp.at(i, j) = acc;
        }
    for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j) {
            double acc = 0.0;
            for (long t = -r; t <= r; ++t)
                acc += k[static_cast<std::size_t>(t + r)] *
                       tmp.at(detail::reflect_index(static_cast<long>(i) + t, static_cast<long>(g.h)), j);
            out.at(i, j) = acc;
        }
    return out;
}

// Binary mask -> blurred, sum-1 heatmap.
inline HeatmapLabel mask_to_heatmap(const MaskGrid& mask, double blur_sigma) {
    if (mask_area(mask) == 0) throw Error("empty label");
    RealGrid g(mask.h, mask.w);
    for (std::size_t i = 0; i < mask.size(); ++i) g.v[i] = mask.v[i] ? 1.0 : 0.0;
    g = gaussian_blur(g, blur_sigma);
    return HeatmapLabel::normalized(std::move(g));
}

inline HeatmapLabel uniform_heatmap(std::size_t h, std::size_t w) {
    return HeatmapLabel{RealGrid(h, w, 1.0 / static_cast<double>(h * w))};
}

// Plain (non-autodiff) bilinear resize; same tap arithmetic as the tensor op.
inline RealGrid bilinear_resize_grid(const RealGrid& g, std::size_t H, std::size_t W) {
    RealGrid out(H, W);
    for (std::size_t I = 0; I < H; ++I) {
        const auto ty = ad::detail::bilinear_tap(I, H, g.h);
        for (std::size_t J = 0; J < W; ++J) {
            const auto tx = ad::detail::bilinear_tap(J, W, g.w);
            out.at(I, J) = (1.0 - ty.w_hi) * ((1.0 - tx.w_hi) * g.at(ty.lo, tx.lo) + tx.w_hi * g.at(ty.lo, tx.hi)) +
                           ty.w_hi * ((1.0 - tx.w_hi) * g.at(ty.hi, tx.lo) + tx.w_hi * g.at(ty.hi, tx.hi));
        }
    }
    return out;
}

inline Image bilinear_resize_image(const Image& img, std::size_t H, std::size_t W) {
    Image out(H, W);
    for (std::size_t I = 0; I < H; ++I) {
        const auto ty = ad::detail::bilinear_tap(I, H, img.h);
        for (std::size_t J = 0; J < W; ++J) {
            const auto tx = ad::detail::bilinear_tap(J, W, img.w);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v =
                    (1.0 - ty.w_hi) * ((1.0 - tx.w_hi) * img.px(ty.lo, tx.lo)[ch] + tx.w_hi * img.px(ty.lo, tx.hi)[ch]) +
                    ty.w_hi * ((1.0 - tx.w_hi) * img.px(ty.hi, tx.lo)[ch] + tx.w_hi * img.px(ty.hi, tx.hi)[ch]);
                out.px(I, J)[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

template <typename T>
inline Grid<T> hflip_grid(const Grid<T>& g) {
    Grid<T> out(g.h, g.w);
    for (std::size_t i = 0; i < g.h; ++i)
        for (std::size_t j = 0; j < g.w; ++j) out.at(i, j) = g.at(i, g.w - 1 - j);
    return out;
}

inline Image hflip_image(const Image& img) {
    Image out(img.h, img.w);
    for (std::size_t i = 0; i < img.h; ++i)
        for (std::size_t j = 0; j < img.w; ++j) {
            const auto* src = img.px(i, img.w - 1 - j);
            auto* dst = out.px(i, j);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
        }
    return out;
}

template <typename T>
inline Grid<T> crop_grid(const Grid<T>& g, std::size_t i0, std::size_t j0, std::size_t h, std::size_t w) {
    if (i0 + h > g.h || j0 + w > g.w) throw Error("crop_grid: out of bounds");
    Grid<T> out(h, w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = g.at(i0 + i, j0 + j);
    return out;
}

inline Image crop_image(const Image& img, std::size_t i0, std::size_t j0, std::size_t h, std::size_t w) {
    if (i0 + h > img.h || j0 + w > img.w) throw Error("crop_image: out of bounds");
    Image out(h, w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const auto* src = img.px(i0 + i, j0 + j);
            auto* dst = out.px(i, j);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
        }
    return out;
}

// Heatmap alpha-blended over the source image, for qualitative inspection.
inline Image overlay_heatmap(const Image& img, const HeatmapLabel& hm, double alpha = 0.55) {
    RealGrid g = hm.g;
    if (g.h != img.h || g.w != img.w) g = bilinear_resize_grid(g, img.h, img.w);
    double mx = 0.0;
    for (double x : g.v) mx = std::max(mx, x);
    Image out(img.h, img.w);
    for (std::size_t i = 0; i < img.h; ++i)
        for (std::size_t j = 0; j < img.w; ++j) {
            const double t = mx > 0.0 ? g.at(i, j) / mx : 0.0;
            const auto* src = img.px(i, j);
            auto* dst = out.px(i, j);
            dst[0] = static_cast<std::uint8_t>(std::lround((1.0 - alpha * t) * src[0] + alpha * t * 255.0));
            dst[1] = static_cast<std::uint8_t>(std::lround((1.0 - alpha * t) * src[1]));
            dst[2] = static_cast<std::uint8_t>(std::lround((1.0 - alpha * t) * src[2]));
        }
    return out;
}

}  // namespace affgro
