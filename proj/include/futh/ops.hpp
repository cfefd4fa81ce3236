#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Layout conventions: feature maps are NCHW, token sequences are [B, N, d],
// matrices are row-major [rows, cols].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "futh/gemm.hpp"
#include "futh/tape.hpp"
#include "futh/tensor.hpp"

namespace futh::ops {

namespace detail {

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
    if (!a.valid()) throw ContractError("uninitialized variable");
    return *a.tape();
}

template <typename T>
Tape<T>& tape_of(const Var<T>& a, const Var<T>& b) {
    if (a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
    return tape_of(a);
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
    if (s.size() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class Binary { add, mul };

template <typename T>
Var<T> elementwise(const Var<T>& a, const Var<T>& b, Binary op) {
    auto& tape = detail::tape_of(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape() != bv.shape()) {
        throw ShapeError(std::string(op == Binary::add ? "add" : "mul") + ": shape mismatch " + to_string(av.shape()) +
                         " vs " + to_string(bv.shape()));
    }
    Tensor<T> out(av.shape());
    const std::size_t n = out.size();
    if (op == Binary::add) {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
    }
    return tape.record(std::move(out), {a, b}, [a, b, op](const Tensor<T>& g, Tape<T>& t) {
        const std::size_t n = g.size();
        if (op == Binary::add) {
            t.accumulate(a, g);
            t.accumulate(b, g);
            return;
        }
        if (a.requires_grad()) {
            auto& ga = t.grad_buffer(a);
            const auto& bv = b.value();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (b.requires_grad()) {
            auto& gb = t.grad_buffer(b);
            const auto& av = a.value();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return elementwise(a, b, Binary::add);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return elementwise(a, b, Binary::mul);
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    auto& tape = detail::tape_of(x);
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
    return tape.record(std::move(out), {x}, [x, c](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
}

/// Adds `y` to every leading slice of `x`; y's shape must equal x's trailing dims.
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y) {
    auto& tape = detail::tape_of(x, y);
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
        throw ShapeError("add_broadcast: " + to_string(ys) + " is not a suffix of " + to_string(xs));
    }
    const std::size_t inner = numel(ys);
    const std::size_t outer = numel(xs) / inner;
    Tensor<T> out = x.value();
    const auto& yv = y.value();
    for (std::size_t o = 0; o < outer; ++o) {
        T* row = out.data().data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) row[i] += yv[i];
    }
    return tape.record(std::move(out), {x, y}, [x, y, inner, outer](const Tensor<T>& g, Tape<T>& t) {
        t.accumulate(x, g);
        if (y.requires_grad()) {
            auto& gy = t.grad_buffer(y);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) gy[i] += g[o * inner + i];
            }
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    auto& tape = detail::tape_of(x);
    return tape.record(Tensor<T>::scalar(x.value().sum()), {x}, [x](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        const T s = g[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    auto& tape = detail::tape_of(x);
    return tape.record(x.value().reshaped(std::move(shape)), {x}, [x](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    auto& tape = detail::tape_of(a, b);
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
        throw ShapeError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    }
    const std::size_t m = as[0], k = as[1], n = bs[1];
    Tensor<T> out(Shape{m, n});
    futh::detail::gemm(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n, false, false,
                       false);
    return tape.record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g, Tape<T>& t) {
        if (a.requires_grad()) {
            futh::detail::gemm(g.data().data(), b.value().data().data(), t.grad_buffer(a).data().data(), m, n, k,
                               false, true, true);
        }
        if (b.requires_grad()) {
            futh::detail::gemm(a.value().data().data(), g.data().data(), t.grad_buffer(b).data().data(), k, m, n,
                               true, false, true);
        }
    });
}

/// x[..., k] * w[k, n] (+ bias[n]) -> [..., n]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* bias = nullptr) {
    auto& tape = detail::tape_of(x, w);
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
        throw ShapeError("linear: incompatible shapes " + to_string(xs) + " and " + to_string(ws));
    }
    const std::size_t k = ws[0], n = ws[1];
    const std::size_t rows = numel(xs) / k;
    Shape os = xs;
    os.back() = n;
    Tensor<T> out(os);
    futh::detail::gemm(x.value().data().data(), w.value().data().data(), out.data().data(), rows, k, n, false, false,
                       false);
    std::vector<Var<T>> inputs{x, w};
    Var<T> b;
    if (bias != nullptr) {
        b = *bias;
        detail::tape_of(x, b);
        if (b.shape() != Shape{n}) throw ShapeError("linear: bias shape " + to_string(b.shape()));
        const auto& bv = b.value();
        for (std::size_t r = 0; r < rows; ++r) {
            T* row = out.data().data() + r * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
        }
        inputs.push_back(b);
    }
    return tape.record(std::move(out), inputs, [x, w, b, rows, k, n](const Tensor<T>& g, Tape<T>& t) {
        if (x.requires_grad()) {
            futh::detail::gemm(g.data().data(), w.value().data().data(), t.grad_buffer(x).data().data(), rows, n, k,
                               false, true, true);
        }
        if (w.requires_grad()) {
            futh::detail::gemm(x.value().data().data(), g.data().data(), t.grad_buffer(w).data().data(), k, rows, n,
                               true, false, true);
        }
        if (b.valid() && b.requires_grad()) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
    });
}

/// Batched product: a[B, m, k] * b[B, k, n], or a * b^T with b[B, n, k] when trans_b.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
    auto& tape = detail::tape_of(a, b);
    const auto& as = a.shape();
    const auto& bs = b.shape();
    detail::require_rank(as, 3, "bmm");
    detail::require_rank(bs, 3, "bmm");
    const std::size_t batch = as[0], m = as[1], k = as[2];
    const std::size_t n = trans_b ? bs[1] : bs[2];
    const std::size_t bk = trans_b ? bs[2] : bs[1];
    if (bs[0] != batch || bk != k) {
        throw ShapeError("bmm: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    }
    Tensor<T> out(Shape{batch, m, n});
    const T* ap = a.value().data().data();
    const T* bp = b.value().data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        futh::detail::gemm(ap + i * m * k, bp + i * k * n, out.data().data() + i * m * n, m, k, n, false, trans_b,
                           false);
    }
    return tape.record(std::move(out), {a, b}, [a, b, batch, m, k, n, trans_b](const Tensor<T>& g, Tape<T>& t) {
        const T* gp = g.data().data();
        const T* ap = a.value().data().data();
        const T* bp = b.value().data().data();
        if (a.requires_grad()) {
            T* ga = t.grad_buffer(a).data().data();
            for (std::size_t i = 0; i < batch; ++i) {
                // dA = G * B^T   (or G * B when B was given transposed)
                futh::detail::gemm(gp + i * m * n, bp + i * k * n, ga + i * m * k, m, n, k, false, !trans_b, true);
            }
        }
        if (b.requires_grad()) {
            T* gb = t.grad_buffer(b).data().data();
            for (std::size_t i = 0; i < batch; ++i) {
                if (trans_b) {
                    // dB[n, k] = G^T * A
                    futh::detail::gemm(gp + i * m * n, ap + i * m * k, gb + i * k * n, n, m, k, true, false, true);
                } else {
                    futh::detail::gemm(ap + i * m * k, gp + i * m * n, gb + i * k * n, k, m, n, true, false, true);
                }
            }
        }
    });
}

/// [B, N, h*dh] -> [B*h, N, dh]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 3, "split_heads");
    if (heads == 0 || s[2] % heads != 0) {
        throw ConfigError("split_heads: width " + std::to_string(s[2]) + " not divisible by " + std::to_string(heads));
    }
    const std::size_t batch = s[0], n = s[1], dh = s[2] / heads;
    auto index = [=](std::size_t b, std::size_t i, std::size_t r, std::size_t j) {
        return std::pair{((b * n + r) * heads + i) * dh + j, ((b * heads + i) * n + r) * dh + j};
    };
    Tensor<T> out(Shape{batch * heads, n, dh});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < heads; ++i)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < dh; ++j) {
                    auto [src, dst] = index(b, i, r, j);
                    out[dst] = xv[src];
                }
    return tape.record(std::move(out), {x}, [x, batch, heads, n, dh, index](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < heads; ++i)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < dh; ++j) {
                        auto [src, dst] = index(b, i, r, j);
                        gx[src] += g[dst];
                    }
    });
}

/// [B*h, N, dh] -> [B, N, h*dh]
template <typename T>
Var<T> merge_heads(const Var<T>& x, std::size_t heads) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 3, "merge_heads");
    if (heads == 0 || s[0] % heads != 0) throw ShapeError("merge_heads: leading dim not divisible by head count");
    const std::size_t batch = s[0] / heads, n = s[1], dh = s[2];
    auto index = [=](std::size_t b, std::size_t i, std::size_t r, std::size_t j) {
        return std::pair{((b * heads + i) * n + r) * dh + j, ((b * n + r) * heads + i) * dh + j};
    };
    Tensor<T> out(Shape{batch, n, heads * dh});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < heads; ++i)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < dh; ++j) {
                    auto [src, dst] = index(b, i, r, j);
                    out[dst] = xv[src];
                }
    return tape.record(std::move(out), {x}, [x, batch, heads, n, dh, index](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < heads; ++i)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < dh; ++j) {
                        auto [src, dst] = index(b, i, r, j);
                        gx[src] += g[dst];
                    }
    });
}

// ---------------------------------------------------------------------------
// Normalizers and activations


namespace detail {

/// Handle the next recorded node will receive; lets a backward closure read its own output.
template <typename T>
Var<T> next_var(Tape<T>& tape) {
    return Var<T>(&tape, tape.size());
}

}  // namespace detail

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    const std::size_t d = xv.shape().back();
    const std::size_t rows = xv.size() / d;
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data().data() + r * d;
        T* o = out.data().data() + r * d;
        const T mx = *std::max_element(in, in + d);
        T s{0};
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < d; ++j) o[j] /= s;
    }
    const Var<T> self = detail::next_var(tape);
    return tape.record(std::move(out), {x}, [x, self, rows, d](const Tensor<T>& g, Tape<T>& t) {
        const auto& y = self.value();
        auto& gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * d;
            T dot{0};
            for (std::size_t j = 0; j < d; ++j) dot += g[off + j] * y[off + j];
            for (std::size_t j = 0; j < d; ++j) gx[off + j] += y[off + j] * (g[off + j] - dot);
        }
    });
}

enum class Activation { relu, gelu, sigmoid };

namespace detail {

template <typename T>
T gelu(T x) {
    return x * T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

}  // namespace detail

template <typename T>
Var<T> activation(const Var<T>& x, Activation kind) {
    auto& tape = detail::tape_of(x);
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    const std::size_t n = out.size();
    switch (kind) {
        case Activation::relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
            break;
        case Activation::gelu:
            for (std::size_t i = 0; i < n; ++i) out[i] = detail::gelu(xv[i]);
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < n; ++i) out[i] = detail::sigmoid(xv[i]);
            break;
    }
    const Var<T> self = detail::next_var(tape);
    return tape.record(std::move(out), {x}, [x, self, kind](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        const auto& xv = x.value();
        const std::size_t n = g.size();
        switch (kind) {
            case Activation::relu:
                // subgradient 0 at 0
                for (std::size_t i = 0; i < n; ++i) gx[i] += xv[i] > T{0} ? g[i] : T{0};
                break;
            case Activation::gelu:
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * detail::gelu_grad(xv[i]);
                break;
            case Activation::sigmoid: {
                const auto& y = self.value();
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
                break;
            }
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return activation(x, Activation::relu);
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    return activation(x, Activation::gelu);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return activation(x, Activation::sigmoid);
}

namespace detail {

/// Shared backward of an affine normalizer over groups of `count` samples.
/// xhat and rstd come from the forward pass; `idx(group, j)` maps to a flat offset.
template <typename T, typename Index>
void normalize_backward(const Tensor<T>& g, const Tensor<T>& xhat, const std::vector<T>& rstd,
                        const Tensor<T>& gamma, std::size_t groups, std::size_t count, Index idx, Tensor<T>* gx,
                        Tensor<T>* ggamma, Tensor<T>* gbeta, bool per_group_affine) {
    for (std::size_t c = 0; c < groups; ++c) {
        T sum_dy{0}, sum_dy_xhat{0};
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t o = idx(c, j);
            const T gam = per_group_affine ? gamma[c] : gamma[j];
            const T dxhat = g[o] * gam;
            sum_dy += dxhat;
            sum_dy_xhat += dxhat * xhat[o];
            if (ggamma != nullptr) (*ggamma)[per_group_affine ? c : j] += g[o] * xhat[o];
            if (gbeta != nullptr) (*gbeta)[per_group_affine ? c : j] += g[o];
        }
        if (gx == nullptr) continue;
        const T inv_n = T{1} / static_cast<T>(count);
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t o = idx(c, j);
            const T gam = per_group_affine ? gamma[c] : gamma[j];
            const T dxhat = g[o] * gam;
            (*gx)[o] += rstd[c] * (dxhat - inv_n * sum_dy - xhat[o] * inv_n * sum_dy_xhat);
        }
    }
}

}  // namespace detail

/// Per-token normalization over the last dimension.
template <typename T>
Var<T> layernorm_lastdim(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T{1e-5}) {
    auto& tape = detail::tape_of(x, gamma);
    const auto& xv = x.value();
    const std::size_t d = xv.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layernorm: affine params must have shape [" + std::to_string(d) + "]");
    }
    const std::size_t rows = xv.size() / d;
    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    std::vector<T> rstd(rows);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data().data() + r * d;
        T mu{0};
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (in[j] - mu) * rstd[r];
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return tape.record(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](const Tensor<T>& g,
                                                                                                 Tape<T>& t) {
                           detail::normalize_backward(
                               g, xhat, rstd, gamma.value(), rows, d,
                               [d](std::size_t r, std::size_t j) { return r * d + j; },
                               x.requires_grad() ? &t.grad_buffer(x) : nullptr,
                               gamma.requires_grad() ? &t.grad_buffer(gamma) : nullptr,
                               beta.requires_grad() ? &t.grad_buffer(beta) : nullptr, false);
                       });
}

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T{0.1};
    T eps = T{1e-5};

    explicit BatchNormStats(std::size_t channels = 1)
        : running_mean(Shape{channels}), running_var(Shape{channels}, T{1}) {}
};

/// Per-channel normalization of NCHW input. Training mode normalizes with
/// batch statistics and updates `stats`; inference uses the running values.
template <typename T>
Var<T> batchnorm_channel(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                         bool training) {
    auto& tape = detail::tape_of(x, gamma);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "batchnorm");
    const std::size_t batch = s[0], channels = s[1], hw = s[2] * s[3];
    if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
        throw ShapeError("batchnorm: affine params must have shape [" + std::to_string(channels) + "]");
    }
    const std::size_t count = batch * hw;
    auto idx = [channels, hw](std::size_t c, std::size_t j) { return ((j / hw) * channels + c) * hw + j % hw; };
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    Tensor<T> xhat(s);
    Tensor<T> out(s);
    std::vector<T> rstd(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        T mu, var;
        if (training) {
            mu = T{0};
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = xv.data().data() + (b * channels + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) mu += p[i];
            }
            mu /= static_cast<T>(count);
            var = T{0};
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = xv.data().data() + (b * channels + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
            }
            const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : T{0};
            var /= static_cast<T>(count);
            stats.running_mean[c] = (T{1} - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
            stats.running_var[c] = (T{1} - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
        } else {
            mu = stats.running_mean[c];
            var = stats.running_var[c];
        }
        rstd[c] = T{1} / std::sqrt(var + stats.eps);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T h = (xv[base + i] - mu) * rstd[c];
                xhat[base + i] = h;
                out[base + i] = h * gv[c] + bv[c];
            }
        }
    }
    return tape.record(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), channels, count, idx,
                        training](const Tensor<T>& g, Tape<T>& t) {
                           Tensor<T>* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
                           if (!training && gx != nullptr) {
                               // Frozen statistics: the map is affine per channel.
                               const auto& gv = gamma.value();
                               for (std::size_t c = 0; c < channels; ++c)
                                   for (std::size_t j = 0; j < count; ++j) {
                                       const std::size_t o = idx(c, j);
                                       (*gx)[o] += g[o] * gv[c] * rstd[c];
                                   }
                               gx = nullptr;
                           }
                           detail::normalize_backward(g, xhat, rstd, gamma.value(), channels, count, idx, gx,
                                                      gamma.requires_grad() ? &t.grad_buffer(gamma) : nullptr,
                                                      beta.requires_grad() ? &t.grad_buffer(beta) : nullptr, true);
                       });
}

// ---------------------------------------------------------------------------
// Convolution and spatial resampling (NCHW)

namespace detail {

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
    std::size_t k() const { return cin * kh * kw; }
    std::size_t cols() const { return batch * ho * wo; }
};

/// Column matrix [cin*kh*kw, batch*ho*wo] with zero padding.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t ncols = g.cols();
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((ci * g.kh + ky) * g.kw + kx) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const T* src = x + (b * g.cin + ci) * g.h * g.w;
                    T* dst = row + b * plane;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        T* drow = dst + oy * g.wo;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                            std::fill(drow, drow + g.wo, T{0});
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(iy) * g.w;
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const auto ix =
                                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0}
                                                                                          : srow[static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
    const std::size_t ncols = g.cols();
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    T* dst = x + (b * g.cin + ci) * g.h * g.w;
                    const T* src = row + b * plane;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        T* drow = dst + static_cast<std::size_t>(iy) * g.w;
                        const T* srow = src + oy * g.wo;
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                            const auto ix =
                                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) drow[ix] += srow[ox];
                        }
                    }
                }
            }
}

}  // namespace detail

/// Cross-correlation with zero padding. Output dims must be integral.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride = 1, std::size_t padding = 0) {
    auto& tape = detail::tape_of(x, kernel);
    const auto& xs = x.shape();
    const auto& ks = kernel.shape();
    detail::require_rank(xs, 4, "conv2d input");
    detail::require_rank(ks, 4, "conv2d kernel");
    if (ks[1] != xs[1]) {
        throw ShapeError("conv2d: kernel " + to_string(ks) + " expects " + std::to_string(ks[1]) +
                         " input channels, input is " + to_string(xs));
    }
    if (ks[2] % 2 == 0 || ks[3] % 2 == 0) throw ShapeError("conv2d: kernel spatial dims must be odd, got " + to_string(ks));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t ph = xs[2] + 2 * padding, pw = xs[3] + 2 * padding;
    if (ph < ks[2] || pw < ks[3] || (ph - ks[2]) % stride != 0 || (pw - ks[3]) % stride != 0) {
        throw ShapeError("conv2d: non-integral output size for input " + to_string(xs) + ", kernel " + to_string(ks) +
                         ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
    }
    const detail::ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, padding,
                                   (ph - ks[2]) / stride + 1, (pw - ks[3]) / stride + 1};
    const std::size_t kdim = geo.k(), ncols = geo.cols(), plane = geo.ho * geo.wo;
    std::vector<T> col(kdim * ncols);
    detail::im2col(x.value().data().data(), geo, col.data());
    std::vector<T> res(geo.cout * ncols);
    futh::detail::gemm(kernel.value().data().data(), col.data(), res.data(), geo.cout, kdim, ncols, false, false, false);
    Tensor<T> out(Shape{geo.batch, geo.cout, geo.ho, geo.wo});
    for (std::size_t co = 0; co < geo.cout; ++co)
        for (std::size_t b = 0; b < geo.batch; ++b)
            std::copy_n(res.data() + co * ncols + b * plane, plane, out.data().data() + (b * geo.cout + co) * plane);
    if (!tape.grad_enabled() || !(x.requires_grad() || kernel.requires_grad())) {
        return tape.record(std::move(out), {x, kernel}, nullptr);
    }
    return tape.record(std::move(out), {x, kernel},
                       [x, kernel, geo, col = std::move(col)](const Tensor<T>& g, Tape<T>& t) {
                           const std::size_t kdim = geo.k(), ncols = geo.cols(), plane = geo.ho * geo.wo;
                           std::vector<T> gmat(geo.cout * ncols);
                           for (std::size_t co = 0; co < geo.cout; ++co)
                               for (std::size_t b = 0; b < geo.batch; ++b)
                                   std::copy_n(g.data().data() + (b * geo.cout + co) * plane, plane,
                                               gmat.data() + co * ncols + b * plane);
                           if (kernel.requires_grad()) {
                               futh::detail::gemm(gmat.data(), col.data(), t.grad_buffer(kernel).data().data(),
                                                  geo.cout, ncols, kdim, false, true, true);
                           }
                           if (x.requires_grad()) {
                               std::vector<T> gcol(kdim * ncols);
                               futh::detail::gemm(kernel.value().data().data(), gmat.data(), gcol.data(), kdim,
                                                  geo.cout, ncols, true, false, false);
                               detail::col2im_add(gcol.data(), geo, t.grad_buffer(x).data().data());
                           }
                       });
}

/// x[B, C, H, W] + bias[C]
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    auto& tape = detail::tape_of(x, bias);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "add_channel_bias");
    if (bias.shape() != Shape{s[1]}) throw ShapeError("add_channel_bias: bias shape " + to_string(bias.shape()));
    const std::size_t batch = s[0], channels = s[1], hw = s[2] * s[3];
    Tensor<T> out = x.value();
    const auto& bv = bias.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
            T* p = out.data().data() + (b * channels + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] += bv[c];
        }
    return tape.record(std::move(out), {x, bias}, [x, bias, batch, channels, hw](const Tensor<T>& g, Tape<T>& t) {
        t.accumulate(x, g);
        if (bias.requires_grad()) {
            auto& gb = t.grad_buffer(bias);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < channels; ++c) {
                    const T* p = g.data().data() + (b * channels + c) * hw;
                    T acc{0};
                    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
                    gb[c] += acc;
                }
        }
    });
}

/// Each pixel replicated into a 2x2 block.
template <typename T>
Var<T> upsample2x_nearest(const Var<T>& x) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "upsample2x_nearest");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
    Tensor<T> out(Shape{s[0], s[1], 2 * h, 2 * w});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
                out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
    return tape.record(std::move(out), {x}, [x, planes, h, w](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx)
                    gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
    });
}

namespace detail {

struct LerpTap {
    std::size_t i0, i1;
    double w1;
};

/// Half-pixel-centred source taps for upscaling `in` samples by `factor`.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t factor) {
    std::vector<LerpTap> taps(in * factor);
    for (std::size_t o = 0; o < taps.size(); ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(src));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

/// Bilinear upscaling by an integer factor (half-pixel centres, edge clamp).
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t factor) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "upsample_bilinear");
    if (factor == 0) throw ShapeError("upsample_bilinear: factor must be positive");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h * factor, ow = w * factor;
    auto ty = detail::lerp_taps(h, factor);
    auto tx = detail::lerp_taps(w, factor);
    Tensor<T> out(Shape{s[0], s[1], oh, ow});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = xv.data().data() + p * h * w;
        T* dst = out.data().data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            const T wy = static_cast<T>(ty[y].w1);
            const T* r0 = src + ty[y].i0 * w;
            const T* r1 = src + ty[y].i1 * w;
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const T wx = static_cast<T>(tx[xx].w1);
                const T top = r0[tx[xx].i0] * (T{1} - wx) + r0[tx[xx].i1] * wx;
                const T bot = r1[tx[xx].i0] * (T{1} - wx) + r1[tx[xx].i1] * wx;
                dst[y * ow + xx] = top * (T{1} - wy) + bot * wy;
            }
        }
    }
    return tape.record(std::move(out), {x},
                       [x, planes, h, w, oh, ow, ty = std::move(ty), tx = std::move(tx)](const Tensor<T>& g,
                                                                                          Tape<T>& t) {
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t p = 0; p < planes; ++p) {
                               const T* src = g.data().data() + p * oh * ow;
                               T* dst = gx.data().data() + p * h * w;
                               for (std::size_t y = 0; y < oh; ++y) {
                                   const T wy = static_cast<T>(ty[y].w1);
                                   T* r0 = dst + ty[y].i0 * w;
                                   T* r1 = dst + ty[y].i1 * w;
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                       const T wx = static_cast<T>(tx[xx].w1);
                                       const T v = src[y * ow + xx];
                                       r0[tx[xx].i0] += v * (T{1} - wy) * (T{1} - wx);
                                       r0[tx[xx].i1] += v * (T{1} - wy) * wx;
                                       r1[tx[xx].i0] += v * wy * (T{1} - wx);
                                       r1[tx[xx].i1] += v * wy * wx;
                                   }
                               }
                           }
                       });
}

/// 2x2 mean pooling, stride 2. Spatial dims must be even.
template <typename T>
Var<T> avgpool2x2(const Var<T>& x) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "avgpool2x2");
    if (s[2] % 2 != 0 || s[3] % 2 != 0) throw ShapeError("avgpool2x2: odd spatial dims " + to_string(s));
    const std::size_t planes = s[0] * s[1], oh = s[2] / 2, ow = s[3] / 2, w = s[3];
    Tensor<T> out(Shape{s[0], s[1], oh, ow});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const T* base = xv.data().data() + (p * s[2] + 2 * y) * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = (base[0] + base[1] + base[w] + base[w + 1]) * T{0.25};
            }
    return tape.record(std::move(out), {x}, [x, planes, oh, ow, w](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    const T v = g[(p * oh + y) * ow + xx] * T{0.25};
                    T* base = gx.data().data() + (p * 2 * oh + 2 * y) * w + 2 * xx;
                    base[0] += v;
                    base[1] += v;
                    base[w] += v;
                    base[w + 1] += v;
                }
    });
}

/// Channel-axis concatenation in argument order.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ContractError("concat_channels: no inputs");
    auto& tape = detail::tape_of(xs.front());
    const Shape& first = xs.front().shape();
    detail::require_rank(first, 4, "concat_channels");
    std::size_t total = 0;
    std::vector<std::size_t> chans;
    for (const auto& v : xs) {
        detail::tape_of(xs.front(), v);
        const auto& s = v.shape();
        if (s.size() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
            throw ShapeError("concat_channels: spatial/batch mismatch " + to_string(first) + " vs " + to_string(s));
        }
        chans.push_back(s[1]);
        total += s[1];
    }
    const std::size_t batch = first[0], hw = first[2] * first[3];
    Tensor<T> out(Shape{batch, total, first[2], first[3]});
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const T* src = xs[i].value().data().data() + b * chans[i] * hw;
            std::copy_n(src, chans[i] * hw, out.data().data() + (b * total + c0) * hw);
            c0 += chans[i];
        }
    }
    return tape.record(std::move(out), xs, [xs, chans, batch, total, hw](const Tensor<T>& g, Tape<T>& t) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (xs[i].requires_grad()) {
                auto& gx = t.grad_buffer(xs[i]);
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* src = g.data().data() + (b * total + c0) * hw;
                    T* dst = gx.data().data() + b * chans[i] * hw;
                    for (std::size_t j = 0; j < chans[i] * hw; ++j) dst[j] += src[j];
                }
            }
            c0 += chans[i];
        }
    });
}

/// Channels [begin, end) of an NCHW tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "slice_channels");
    if (begin >= end || end > s[1]) throw ShapeError("slice_channels: bad range for " + to_string(s));
    const std::size_t batch = s[0], channels = s[1], hw = s[2] * s[3], width = end - begin;
    Tensor<T> out(Shape{batch, width, s[2], s[3]});
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(x.value().data().data() + (b * channels + begin) * hw, width * hw,
                    out.data().data() + b * width * hw);
    return tape.record(std::move(out), {x}, [x, batch, channels, hw, width, begin](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < width * hw; ++j) gx[(b * channels + begin) * hw + j] += g[b * width * hw + j];
    });
}

enum class Reduce { mean, max };

/// Spatial pooling of every channel: [B, C, H, W] -> [B, C].
template <typename T>
Var<T> global_pool(const Var<T>& x, Reduce kind) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "global_pool");
    const std::size_t planes = s[0] * s[1], hw = s[2] * s[3];
    Tensor<T> out(Shape{s[0], s[1]});
    std::vector<std::size_t> arg(kind == Reduce::max ? planes : 0);
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = xv.data().data() + p * hw;
        if (kind == Reduce::mean) {
            T acc{0};
            for (std::size_t i = 0; i < hw; ++i) acc += src[i];
            out[p] = acc / static_cast<T>(hw);
        } else {
            const auto it = std::max_element(src, src + hw);
            arg[p] = static_cast<std::size_t>(it - src);
            out[p] = *it;
        }
    }
    return tape.record(std::move(out), {x}, [x, kind, planes, hw, arg = std::move(arg)](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t p = 0; p < planes; ++p) {
            if (kind == Reduce::mean) {
                const T v = g[p] / static_cast<T>(hw);
                for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
            } else {
                gx[p * hw + arg[p]] += g[p];
            }
        }
    });
}

/// Reduction across channels at every pixel: [B, C, H, W] -> [B, 1, H, W].
template <typename T>
Var<T> channel_pool(const Var<T>& x, Reduce kind) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "channel_pool");
    const std::size_t batch = s[0], channels = s[1], hw = s[2] * s[3];
    Tensor<T> out(Shape{batch, 1, s[2], s[3]});
    std::vector<std::size_t> arg(kind == Reduce::max ? batch * hw : 0);
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            T acc = kind == Reduce::mean ? T{0} : -std::numeric_limits<T>::infinity();
            std::size_t best = 0;
            for (std::size_t c = 0; c < channels; ++c) {
                const T v = xv[(b * channels + c) * hw + i];
                if (kind == Reduce::mean) {
                    acc += v;
                } else if (v > acc) {
                    acc = v;
                    best = c;
                }
            }
            if (kind == Reduce::mean) {
                out[b * hw + i] = acc / static_cast<T>(channels);
            } else {
                out[b * hw + i] = acc;
                arg[b * hw + i] = best;
            }
        }
    return tape.record(std::move(out), {x},
                       [x, kind, batch, channels, hw, arg = std::move(arg)](const Tensor<T>& g, Tape<T>& t) {
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t i = 0; i < hw; ++i) {
                                   const T v = g[b * hw + i];
                                   if (kind == Reduce::mean) {
                                       const T share = v / static_cast<T>(channels);
                                       for (std::size_t c = 0; c < channels; ++c) gx[(b * channels + c) * hw + i] += share;
                                   } else {
                                       gx[(b * channels + arg[b * hw + i]) * hw + i] += v;
                                   }
                               }
                       });
}

/// x[B, C, H, W] scaled by per-channel factors s[B, C].
template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
    auto& tape = detail::tape_of(x, s);
    const auto& xs = x.shape();
    detail::require_rank(xs, 4, "scale_channels");
    if (s.shape() != Shape{xs[0], xs[1]}) {
        throw ShapeError("scale_channels: factors " + to_string(s.shape()) + " for input " + to_string(xs));
    }
    const std::size_t planes = xs[0] * xs[1], hw = xs[2] * xs[3];
    Tensor<T> out(xs);
    const auto& xv = x.value();
    const auto& sv = s.value();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = xv[p * hw + i] * sv[p];
    return tape.record(std::move(out), {x, s}, [x, s, planes, hw](const Tensor<T>& g, Tape<T>& t) {
        const auto& xv = x.value();
        const auto& sv = s.value();
        if (x.requires_grad()) {
            auto& gx = t.grad_buffer(x);
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p * hw + i] * sv[p];
        }
        if (s.requires_grad()) {
            auto& gs = t.grad_buffer(s);
            for (std::size_t p = 0; p < planes; ++p) {
                T acc{0};
                for (std::size_t i = 0; i < hw; ++i) acc += g[p * hw + i] * xv[p * hw + i];
                gs[p] += acc;
            }
        }
    });
}

/// x[B, C, H, W] scaled by per-pixel factors s[B, 1, H, W].
template <typename T>
Var<T> scale_pixels(const Var<T>& x, const Var<T>& s) {
    auto& tape = detail::tape_of(x, s);
    const auto& xs = x.shape();
    detail::require_rank(xs, 4, "scale_pixels");
    if (s.shape() != Shape{xs[0], 1, xs[2], xs[3]}) {
        throw ShapeError("scale_pixels: factors " + to_string(s.shape()) + " for input " + to_string(xs));
    }
    const std::size_t batch = xs[0], channels = xs[1], hw = xs[2] * xs[3];
    Tensor<T> out(xs);
    const auto& xv = x.value();
    const auto& sv = s.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < hw; ++i)
                out[(b * channels + c) * hw + i] = xv[(b * channels + c) * hw + i] * sv[b * hw + i];
    return tape.record(std::move(out), {x, s}, [x, s, batch, channels, hw](const Tensor<T>& g, Tape<T>& t) {
        const auto& xv = x.value();
        const auto& sv = s.value();
        Tensor<T>* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
        Tensor<T>* gs = s.requires_grad() ? &t.grad_buffer(s) : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t o = (b * channels + c) * hw + i;
                    if (gx != nullptr) (*gx)[o] += g[o] * sv[b * hw + i];
                    if (gs != nullptr) (*gs)[b * hw + i] += g[o] * xv[o];
                }
    });
}

// ---------------------------------------------------------------------------
// Token <-> map layout

/// Splits [B, C, H, W] into non-overlapping P x P patches -> [B, (H/P)(W/P), C*P*P].
/// Patches are numbered row-major over the grid; features ordered (channel, row, col).
template <typename T>
Var<T> patchify(const Var<T>& x, std::size_t patch) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "patchify");
    if (patch == 0 || s[2] % patch != 0 || s[3] % patch != 0) {
        throw ShapeError("patchify: patch size " + std::to_string(patch) + " does not divide image " + to_string(s));
    }
    const std::size_t batch = s[0], c = s[1], h = s[2], w = s[3];
    const std::size_t gh = h / patch, gw = w / patch, feat = c * patch * patch;
    auto src_index = [=](std::size_t b, std::size_t n, std::size_t f) {
        const std::size_t gy = n / gw, gx = n % gw;
        const std::size_t ch = f / (patch * patch), py = (f / patch) % patch, px = f % patch;
        return ((b * c + ch) * h + gy * patch + py) * w + gx * patch + px;
    };
    Tensor<T> out(Shape{batch, gh * gw, feat});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t n = 0; n < gh * gw; ++n)
            for (std::size_t f = 0; f < feat; ++f) out[(b * gh * gw + n) * feat + f] = xv[src_index(b, n, f)];
    return tape.record(std::move(out), {x}, [x, batch, gh, gw, feat, src_index](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t n = 0; n < gh * gw; ++n)
                for (std::size_t f = 0; f < feat; ++f) gx[src_index(b, n, f)] += g[(b * gh * gw + n) * feat + f];
    });
}

/// [B, gh*gw, d] -> [B, d, gh, gw]
template <typename T>
Var<T> tokens_to_map(const Var<T>& x, std::size_t gh, std::size_t gw) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 3, "tokens_to_map");
    if (s[1] != gh * gw) {
        throw ShapeError("tokens_to_map: " + std::to_string(s[1]) + " tokens for a " + std::to_string(gh) + "x" +
                         std::to_string(gw) + " grid");
    }
    const std::size_t batch = s[0], n = s[1], d = s[2];
    Tensor<T> out(Shape{batch, d, gh, gw});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < d; ++c) out[(b * d + c) * n + i] = xv[(b * n + i) * d + c];
    return tape.record(std::move(out), {x}, [x, batch, n, d](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) gx[(b * n + i) * d + c] += g[(b * d + c) * n + i];
    });
}

/// [B, d, gh, gw] -> [B, gh*gw, d]; inverse of tokens_to_map.
template <typename T>
Var<T> map_to_tokens(const Var<T>& x) {
    auto& tape = detail::tape_of(x);
    const auto& s = x.shape();
    detail::require_rank(s, 4, "map_to_tokens");
    const std::size_t batch = s[0], d = s[1], n = s[2] * s[3];
    Tensor<T> out(Shape{batch, n, d});
    const auto& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < d; ++c)
            for (std::size_t i = 0; i < n; ++i) out[(b * n + i) * d + c] = xv[(b * d + c) * n + i];
    return tape.record(std::move(out), {x}, [x, batch, n, d](const Tensor<T>& g, Tape<T>& t) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < d; ++c)
                for (std::size_t i = 0; i < n; ++i) gx[(b * d + c) * n + i] += g[(b * n + i) * d + c];
    });
}

}  // namespace futh::ops
