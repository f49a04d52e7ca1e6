#pragma once

// Minimal reverse-mode autodiff over dense double tensors. Graphs are built
// per forward pass; backward() runs the tape in reverse topological order.
// All math is plain loops in a fixed order, so results are bit-reproducible
// for a given seed on a given platform.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "affgro/core.hpp"

namespace affgro::ad {

struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad{false};
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    std::size_t numel() const { return val.size(); }
    std::vector<double>& grad_buf() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor leaf(std::vector<std::size_t> shape, std::vector<double> val, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::move(val);
        n->requires_grad = requires_grad;
        std::size_t expect = 1;
        for (auto d : n->shape) expect *= d;
        if (expect != n->val.size()) throw Error("tensor shape/data mismatch");
        return Tensor(n);
    }

    static Tensor constant(std::vector<std::size_t> shape, std::vector<double> val) {
        return leaf(std::move(shape), std::move(val), false);
    }

    static Tensor scalar(double x) { return constant({1}, {x}); }

    bool defined() const { return n_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->numel(); }
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return n_->shape.size() < 2 ? 1 : n_->shape.at(1); }
    const std::vector<double>& val() const { return n_->val; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    double item() const {
        if (numel() != 1) throw Error("item() on non-scalar tensor");
        return n_->val[0];
    }
    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

inline Tensor make_op(std::vector<std::size_t> shape, std::vector<double> val,
                      std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    for (const auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw Error(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] + b.val()[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [an = a.node(), bn = b.node()](Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] - b.val()[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [an = a.node(), bn = b.node()](Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] * b.val()[i];
    return detail::make_op(a.shape(), std::move(v), {a, b}, [an = a.node(), bn = b.node()](Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bn->val[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * an->val[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] * c;
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node(), c](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] + c;
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] > 0.0 ? a.val()[i] : 0.0;
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (an->val[i] > 0.0) g[i] += out.grad[i];
    });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = a.val()[i];
        v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = an->val[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += out.grad[i] * (cdf + x * pdf);
        }
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a.val()[i]));
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * out.val[i] * (1.0 - out.val[i]);
    });
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    std::size_t expect = 1;
    for (auto d : shape) expect *= d;
    if (expect != a.numel()) throw Error("reshape: element count mismatch");
    return detail::make_op(std::move(shape), a.val(), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.val()[i * n + j];
    return detail::make_op({n, m}, std::move(v), {a}, [an = a.node(), m, n](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += out.grad[j * m + i];
    });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    const std::size_t n = a.cols();
    if (r1 > a.rows() || r0 >= r1) throw Error("slice_rows: bad range");
    std::vector<double> v(a.val().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                          a.val().begin() + static_cast<std::ptrdiff_t>(r1 * n));
    return detail::make_op({r1 - r0, n}, std::move(v), {a}, [an = a.node(), r0, n](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < out.grad.size(); ++i) g[r0 * n + i] += out.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    const std::size_t m = a.rows(), n = a.cols();
    if (c1 > n || c0 >= c1) throw Error("slice_cols: bad range");
    const std::size_t k = c1 - c0;
    std::vector<double> v(m * k);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) v[i * k + j] = a.val()[i * n + c0 + j];
    return detail::make_op({m, k}, std::move(v), {a}, [an = a.node(), m, n, k, c0](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) g[i * n + c0 + j] += out.grad[i * k + j];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error("concat_rows: empty");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) throw Error("concat_rows: column mismatch");
        m += p.rows();
    }
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& p : parts) v.insert(v.end(), p.val().begin(), p.val().end());
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op({m, n}, std::move(v), parts, [nodes](Node& out) {
        std::size_t off = 0;
        for (const auto& pn : nodes) {
            const std::size_t cnt = pn->numel();
            if (pn->requires_grad) {
                auto& g = pn->grad_buf();
                for (std::size_t i = 0; i < cnt; ++i) g[i] += out.grad[off + i];
            }
            off += cnt;
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error("concat_cols: empty");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw Error("concat_cols: row mismatch");
        n += p.cols();
    }
    std::vector<double> v(m * n);
    std::size_t coff = 0;
    for (const auto& p : parts) {
        const std::size_t k = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) v[i * n + coff + j] = p.val()[i * k + j];
        coff += k;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    return detail::make_op({m, n}, std::move(v), parts, [nodes, widths, m, n](Node& out) {
        std::size_t coff2 = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
            const std::size_t k = widths[pi];
            if (nodes[pi]->requires_grad) {
                auto& g = nodes[pi]->grad_buf();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < k; ++j) g[i * k + j] += out.grad[i * n + coff2 + j];
            }
            coff2 += k;
        }
    });
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw Error("matmul: inner dimension mismatch");
    std::vector<double> v(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.val()[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) v[i * n + j] += av * b.val()[p * n + j];
        }
    return detail::make_op({m, n}, std::move(v), {a, b}, [an = a.node(), bn = b.node(), m, k, n](Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += out.grad[i * n + j] * bn->val[p * n + j];
                    g[i * k + p] += acc;
                }
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i) acc += an->val[i * k + p] * out.grad[i * n + j];
                    g[p * n + j] += acc;
                }
        }
    });
}

// X[m,n] + b[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    const std::size_t m = x.rows(), n = x.cols();
    if (b.numel() != n) throw Error("add_rowvec: width mismatch");
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = x.val()[i * n + j] + b.val()[j];
    return detail::make_op({m, n}, std::move(v), {x, b}, [xn = x.node(), bn = b.node(), m, n](Node& out) {
        if (xn->requires_grad) {
            auto& g = xn->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += out.grad[i * n + j];
        }
    });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

// ---- reductions & normalizations ----

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.val()) s += x;
    return detail::make_op({1}, {s}, {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor softmax_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a.val()[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.val()[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            v[i * n + j] = std::exp(a.val()[i * n + j] - mx);
            z += v[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= z;
    }
    return detail::make_op({m, n}, std::move(v), {a}, [an = a.node(), m, n](Node& out) {
        auto& g = an->grad_buf();
        const auto& y = out.val;
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += out.grad[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (out.grad[i * n + j] - dot);
        }
    });
}

// Softmax jointly over every element.
inline Tensor softmax_all(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> v(n);
    double mx = a.val()[0];
    for (double x : a.val()) mx = std::max(mx, x);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = std::exp(a.val()[i] - mx);
        z += v[i];
    }
    for (std::size_t i = 0; i < n; ++i) v[i] /= z;
    return detail::make_op(a.shape(), std::move(v), {a}, [an = a.node()](Node& out) {
        auto& g = an->grad_buf();
        const auto& y = out.val;
        double dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) dot += out.grad[i] * y[i];
        for (std::size_t i = 0; i < y.size(); ++i) g[i] += y[i] * (out.grad[i] - dot);
    });
}

// Per-row layer norm with learned gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) throw Error("layer_norm: parameter width mismatch");
    std::vector<double> v(m * n), xhat(m * n), inv_sigma(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += x.val()[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = x.val()[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (x.val()[i * n + j] - mu) * inv_sigma[i];
            v[i * n + j] = xhat[i * n + j] * gamma.val()[j] + beta.val()[j];
        }
    }
    return detail::make_op({m, n}, std::move(v), {x, gamma, beta},
                           [xn = x.node(), gn = gamma.node(), bn = beta.node(), m, n, xhat, inv_sigma](Node& out) {
        for (std::size_t i = 0; i < m; ++i) {
            if (xn->requires_grad) {
                auto& gx = xn->grad_buf();
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double dxhat = out.grad[i * n + j] * gn->val[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat[i * n + j];
                }
                mean_dxhat /= static_cast<double>(n);
                mean_dxhat_xhat /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double dxhat = out.grad[i * n + j] * gn->val[j];
                    gx[i * n + j] += inv_sigma[i] * (dxhat - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
                }
            }
            if (gn->requires_grad) {
                auto& gg = gn->grad_buf();
                for (std::size_t j = 0; j < n; ++j) gg[j] += out.grad[i * n + j] * xhat[i * n + j];
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buf();
                for (std::size_t j = 0; j < n; ++j) gb[j] += out.grad[i * n + j];
            }
        }
    });
}

// ---- scalar-producing ops ----

inline Tensor pick(const Tensor& a, std::size_t idx) {
    if (idx >= a.numel()) throw Error("pick: index out of range");
    return detail::make_op({1}, {a.val()[idx]}, {a}, [an = a.node(), idx](Node& out) {
        an->grad_buf()[idx] += out.grad[0];
    });
}

inline Tensor logsumexp(const Tensor& a) {
    double mx = a.val()[0];
    for (double x : a.val()) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : a.val()) z += std::exp(x - mx);
    const double lse = mx + std::log(z);
    return detail::make_op({1}, {lse}, {a}, [an = a.node(), lse](Node& out) {
        auto& g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[0] * std::exp(an->val[i] - lse);
    });
}

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    detail::check_same_shape(a, b, "cosine_similarity");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += a.val()[i] * b.val()[i];
        na2 += a.val()[i] * a.val()[i];
        nb2 += b.val()[i] * b.val()[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    if (na < eps || nb < eps) throw Error("cosine_similarity: zero vector");
    const double c = dot / (na * nb);
    return detail::make_op({1}, {c}, {a, b}, [an = a.node(), bn = b.node(), na, nb, c](Node& out) {
        const double g0 = out.grad[0];
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += g0 * (bn->val[i] / (na * nb) - c * an->val[i] / (na * na));
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += g0 * (an->val[i] / (na * nb) - c * bn->val[i] / (nb * nb));
        }
    });
}

// sum_i t_i * log((t_i + eps) / (p_i + eps)) with a constant target.
inline Tensor kl_to_const_target(const Tensor& pred, const std::vector<double>& target, double eps) {
    if (pred.numel() != target.size()) throw Error("kl_to_const_target: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i)
        s += target[i] * std::log((target[i] + eps) / (pred.val()[i] + eps));
    return detail::make_op({1}, {s}, {pred}, [pn = pred.node(), target, eps](Node& out) {
        auto& g = pn->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[0] * target[i] / (pn->val[i] + eps);
    });
}

// out = bias + sum_i coeff_i * scalars_i
inline Tensor affine_combination(const std::vector<Tensor>& scalars, const std::vector<double>& coeffs,
                                 double bias = 0.0) {
    if (scalars.size() != coeffs.size()) throw Error("affine_combination: size mismatch");
    double s = bias;
    for (std::size_t i = 0; i < scalars.size(); ++i) s += coeffs[i] * scalars[i].item();
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& t : scalars) nodes.push_back(t.node());
    return detail::make_op({1}, {s}, scalars, [nodes, coeffs](Node& out) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i]->requires_grad) nodes[i]->grad_buf()[0] += out.grad[0] * coeffs[i];
    });
}

// out = a / s with a scalar tensor s.
inline Tensor div_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw Error("div_scalar: divisor must be scalar");
    const double sv = s.item();
    if (sv == 0.0) throw Error("div_scalar: division by zero");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.val()[i] / sv;
    return detail::make_op(a.shape(), std::move(v), {a, s}, [an = a.node(), sn = s.node(), sv](Node& out) {
        if (an->requires_grad) {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] / sv;
        }
        if (sn->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * an->val[i];
            sn->grad_buf()[0] -= acc / (sv * sv);
        }
    });
}

// Detach: value flows, gradient does not.
inline Tensor detach(const Tensor& a) { return Tensor::constant(a.shape(), a.val()); }

// ---- spatial ops (feature maps stored as [h*w, c] row-major tokens) ----

// Transposed conv, kernel 2, stride 2: [h*w, cin] -> [2h*2w, cout].
// Weight layout: [cin][cout][di][dj] flattened; bias [cout].
inline Tensor conv_transpose2x2(const Tensor& x, std::size_t h, std::size_t w, const Tensor& weight,
                                const Tensor& bias, std::size_t cin, std::size_t cout) {
    if (x.rows() != h * w || x.cols() != cin) throw Error("conv_transpose2x2: input shape mismatch");
    if (weight.numel() != cin * cout * 4 || bias.numel() != cout) throw Error("conv_transpose2x2: weight shape mismatch");
    const std::size_t H = 2 * h, W = 2 * w;
    std::vector<double> v(H * W * cout);
    for (std::size_t p = 0; p < H * W; ++p)
        for (std::size_t oc = 0; oc < cout; ++oc) v[p * cout + oc] = bias.val()[oc];
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t ic = 0; ic < cin; ++ic) {
                const double xv = x.val()[(i * w + j) * cin + ic];
                if (xv == 0.0) continue;
                for (std::size_t oc = 0; oc < cout; ++oc)
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t op = (2 * i + di) * W + (2 * j + dj);
                            v[op * cout + oc] += xv * weight.val()[((ic * cout + oc) * 2 + di) * 2 + dj];
                        }
            }
    return detail::make_op({H * W, cout}, std::move(v), {x, weight, bias},
                           [xn = x.node(), wn = weight.node(), bn = bias.node(), h, w, cin, cout, W](Node& out) {
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    double gx = 0.0;
                    for (std::size_t oc = 0; oc < cout; ++oc)
                        for (std::size_t di = 0; di < 2; ++di)
                            for (std::size_t dj = 0; dj < 2; ++dj) {
                                const std::size_t op = (2 * i + di) * W + (2 * j + dj);
                                const double go = out.grad[op * cout + oc];
                                const double wv = wn->val[((ic * cout + oc) * 2 + di) * 2 + dj];
                                gx += go * wv;
                                if (wn->requires_grad)
                                    wn->grad_buf()[((ic * cout + oc) * 2 + di) * 2 + dj] +=
                                        go * xn->val[(i * w + j) * cin + ic];
                            }
                    if (xn->requires_grad) xn->grad_buf()[(i * w + j) * cin + ic] += gx;
                }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buf();
            const std::size_t npix = out.numel() / cout;
            for (std::size_t p = 0; p < npix; ++p)
                for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += out.grad[p * cout + oc];
        }
    });
}

namespace detail {

struct BilinearTap {
    std::size_t lo, hi;
    double w_hi;
};

inline BilinearTap bilinear_tap(std::size_t out_idx, std::size_t out_len, std::size_t in_len) {
    // half-pixel centers, clamped to the valid range
    double s = (static_cast<double>(out_idx) + 0.5) * static_cast<double>(in_len) / static_cast<double>(out_len) - 0.5;
    if (s < 0.0) s = 0.0;
    const double hi_bound = static_cast<double>(in_len - 1);
    if (s > hi_bound) s = hi_bound;
    const auto lo = static_cast<std::size_t>(std::floor(s));
    const std::size_t hi = std::min(lo + 1, in_len - 1);
    return {lo, hi, s - static_cast<double>(lo)};
}

}  // namespace detail

// Bilinear resize of a [h*w, c] map to [H*W, c].
inline Tensor bilinear_resize(const Tensor& x, std::size_t h, std::size_t w, std::size_t H, std::size_t W) {
    const std::size_t c = x.cols();
    if (x.rows() != h * w) throw Error("bilinear_resize: input shape mismatch");
    std::vector<double> v(H * W * c);
    for (std::size_t I = 0; I < H; ++I) {
        const auto ty = detail::bilinear_tap(I, H, h);
        for (std::size_t J = 0; J < W; ++J) {
            const auto tx = detail::bilinear_tap(J, W, w);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v00 = x.val()[(ty.lo * w + tx.lo) * c + ch];
                const double v01 = x.val()[(ty.lo * w + tx.hi) * c + ch];
                const double v10 = x.val()[(ty.hi * w + tx.lo) * c + ch];
                const double v11 = x.val()[(ty.hi * w + tx.hi) * c + ch];
                v[(I * W + J) * c + ch] = (1.0 - ty.w_hi) * ((1.0 - tx.w_hi) * v00 + tx.w_hi * v01) +
                                          ty.w_hi * ((1.0 - tx.w_hi) * v10 + tx.w_hi * v11);
            }
        }
    }
    return detail::make_op({H * W, c}, std::move(v), {x}, [xn = x.node(), h, w, H, W, c](Node& out) {
        auto& g = xn->grad_buf();
        for (std::size_t I = 0; I < H; ++I) {
            const auto ty = detail::bilinear_tap(I, H, h);
            for (std::size_t J = 0; J < W; ++J) {
                const auto tx = detail::bilinear_tap(J, W, w);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double go = out.grad[(I * W + J) * c + ch];
                    g[(ty.lo * w + tx.lo) * c + ch] += go * (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
                    g[(ty.lo * w + tx.hi) * c + ch] += go * (1.0 - ty.w_hi) * tx.w_hi;
                    g[(ty.hi * w + tx.lo) * c + ch] += go * ty.w_hi * (1.0 - tx.w_hi);
                    g[(ty.hi * w + tx.hi) * c + ch] += go * ty.w_hi * tx.w_hi;
                }
            }
        }
    });
}

// Crop rows of a [h*w, c] map to the rectangle [i0,i0+hh) x [j0,j0+ww).
inline Tensor crop2d(const Tensor& x, std::size_t h, std::size_t w, std::size_t i0, std::size_t j0,
                     std::size_t hh, std::size_t ww) {
    const std::size_t c = x.cols();
    if (x.rows() != h * w) throw Error("crop2d: input shape mismatch");
    if (i0 + hh > h || j0 + ww > w) throw Error("crop2d: rectangle out of bounds");
    std::vector<double> v(hh * ww * c);
    for (std::size_t i = 0; i < hh; ++i)
        for (std::size_t j = 0; j < ww; ++j)
            for (std::size_t ch = 0; ch < c; ++ch)
                v[(i * ww + j) * c + ch] = x.val()[((i0 + i) * w + (j0 + j)) * c + ch];
    return detail::make_op({hh * ww, c}, std::move(v), {x}, [xn = x.node(), w, i0, j0, hh, ww, c](Node& out) {
        auto& g = xn->grad_buf();
        for (std::size_t i = 0; i < hh; ++i)
            for (std::size_t j = 0; j < ww; ++j)
                for (std::size_t ch = 0; ch < c; ++ch)
                    g[((i0 + i) * w + (j0 + j)) * c + ch] += out.grad[(i * ww + j) * c + ch];
    });
}

// Embed a [h*w, c] map into a zero [H*W, c] canvas at (i0, j0).
inline Tensor pad_embed2d(const Tensor& x, std::size_t h, std::size_t w, std::size_t i0, std::size_t j0,
                          std::size_t H, std::size_t W) {
    const std::size_t c = x.cols();
    if (x.rows() != h * w) throw Error("pad_embed2d: input shape mismatch");
    if (i0 + h > H || j0 + w > W) throw Error("pad_embed2d: rectangle out of bounds");
    std::vector<double> v(H * W * c, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t ch = 0; ch < c; ++ch)
                v[((i0 + i) * W + (j0 + j)) * c + ch] = x.val()[(i * w + j) * c + ch];
    return detail::make_op({H * W, c}, std::move(v), {x}, [xn = x.node(), h, w, i0, j0, W, c](Node& out) {
        auto& g = xn->grad_buf();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t ch = 0; ch < c; ++ch)
                    g[(i * w + j) * c + ch] += out.grad[((i0 + i) * W + (j0 + j)) * c + ch];
    });
}

// ---- backward driver ----

inline void backward(const Tensor& root) {
    Node* r = root.node().get();
    if (!r->requires_grad) throw Error("backward: root does not require grad");
    r->grad_buf();
    if (r->numel() == 1) {
        r->grad[0] = 1.0;
    } else {
        throw Error("backward: root must be scalar");
    }
    // iterative post-order DFS
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    // topo is post-order: parents before children; walk children-first
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && node->grad.size() == node->val.size()) node->backprop(*node);
    }
}

}  // namespace affgro::ad
