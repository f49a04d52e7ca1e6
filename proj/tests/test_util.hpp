#pragma once

#include <functional>

#include "affgro/tensor.hpp"

namespace testutil {

using affgro::ad::Tensor;

// Central-difference check of d(out)/d(leaf) for a scalar-valued graph
// builder. Returns the max relative error across elements.
inline double gradient_max_rel_error(const std::function<Tensor(const Tensor&)>& build,
                                     const std::vector<std::size_t>& shape, std::vector<double> x0,
                                     double step = 1e-6) {
    auto leaf = Tensor::leaf(shape, x0, true);
    auto out = build(leaf);
    affgro::ad::backward(out);
    const auto analytic = leaf.grad();

    double worst = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        auto xp = x0;
        xp[i] += step;
        auto xm = x0;
        xm[i] -= step;
        const double fp = build(Tensor::leaf(shape, xp, false)).item();
        const double fm = build(Tensor::leaf(shape, xm, false)).item();
        const double fd = (fp - fm) / (2.0 * step);
        const double denom = std::max({1e-8, std::abs(fd), std::abs(analytic[i])});
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

inline std::vector<double> random_vec(affgro::Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

}  // namespace testutil
