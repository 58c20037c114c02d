// Differentiable tensor operations.
//
// Every op computes its value eagerly and, when an input is tracked, records
// a backward closure on the shared tape. Closures capture input tensors by
// value; the payloads are shared, not copied.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "mwnet/detail/blas.hpp"
#include "mwnet/tensor.hpp"

namespace mwnet {

enum class UnaryKind { Sigmoid, Tanh, Relu };
enum class BinaryKind { Add, Sub, Mul };

namespace detail {

template <typename T>
void axpy(std::vector<T>& dst, const std::vector<T>& src, T a = T(1)) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                 int padding, int groups) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    require(groups >= 1 && xs.c % groups == 0,
            "conv2d: input channels ", xs.c, " not divisible by groups ", groups);
    require(ws.n % groups == 0 && ws.c == xs.c / groups,
            "conv2d: weight shape ", ws.str(), " incompatible with input ", xs.str(),
            " at groups ", groups);
    require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
    const int oh = detail::conv_out_dim(xs.h, padding, ws.h, stride);
    const int ow = detail::conv_out_dim(xs.w, padding, ws.w, stride);
    require(oh >= 1 && ow >= 1, "conv2d: kernel ", ws.str(), " larger than padded input ",
            xs.str());
    if (bias)
        require(bias->shape() == Shape{1, ws.n, 1, 1}, "conv2d: bias shape ",
                bias->shape().str(), " must be (1,", ws.n, ",1,1)");

    const int cin = xs.c, cout = ws.n, kh = ws.h, kw = ws.w;
    const int cing = cin / groups, coutg = cout / groups;
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    const bool depthwise = (groups == cin && cout == cin);
    const bool pointwise = (groups == 1 && kh == 1 && kw == 1 && stride == 1 && padding == 0);

    Tensor<T> out = Tensor<T>::zeros({xs.n, cout, oh, ow});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        const auto& wv = weight.data();
        std::vector<T> cols;
        if (!pointwise && !depthwise) cols.resize(static_cast<std::size_t>(cing) * kh * kw * ohw);
        for (int i = 0; i < xs.n; ++i) {
            const T* xi = xv.data() + static_cast<std::size_t>(i) * cin * xs.h * xs.w;
            T* oi = o.data() + static_cast<std::size_t>(i) * cout * ohw;
            if (pointwise) {
                detail::gemm(false, false, cout, static_cast<int>(ohw), cin, T(1), wv.data(), cin,
                             xi, static_cast<int>(ohw), T(0), oi, static_cast<int>(ohw));
            } else if (depthwise) {
                for (int ch = 0; ch < cin; ++ch) {
                    const T* xc = xi + static_cast<std::size_t>(ch) * xs.h * xs.w;
                    const T* wc = wv.data() + static_cast<std::size_t>(ch) * kh * kw;
                    T* oc = oi + static_cast<std::size_t>(ch) * ohw;
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox) {
                            T acc = T(0);
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= xs.h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride - padding + kx;
                                    if (ix < 0 || ix >= xs.w) continue;
                                    acc += wc[ky * kw + kx] * xc[iy * xs.w + ix];
                                }
                            }
                            oc[oy * ow + ox] = acc;
                        }
                    }
                }
            } else {
                const int kk = cing * kh * kw;
                for (int g = 0; g < groups; ++g) {
                    detail::im2col(xi + static_cast<std::size_t>(g) * cing * xs.h * xs.w, cing,
                                   xs.h, xs.w, kh, kw, stride, padding, cols.data());
                    detail::gemm(false, false, coutg, static_cast<int>(ohw), kk, T(1),
                                 wv.data() + static_cast<std::size_t>(g) * coutg * kk, kk,
                                 cols.data(), static_cast<int>(ohw), T(0),
                                 oi + static_cast<std::size_t>(g) * coutg * ohw,
                                 static_cast<int>(ohw));
                }
            }
            if (bias) {
                const auto& bv = bias->data();
                for (int ch = 0; ch < cout; ++ch) {
                    T* oc = oi + static_cast<std::size_t>(ch) * ohw;
                    for (std::size_t p = 0; p < ohw; ++p) oc[p] += bv[ch];
                }
            }
        }
    }

    Tape<T>* tp = tape_of<T>({&x, &weight, bias});
    if (tp) {
        const int nx = x.node(), nw = weight.node(), nb = bias ? bias->node() : -1;
        Tensor<T> xc = x, wc = weight;
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            const Shape xs2 = xc.shape();
            const Shape ws2 = wc.shape();
            const auto& xv = xc.data();
            const auto& wv = wc.data();
            if (nb >= 0) {
                auto& gb = t.grad_buf(nb);
                for (int i = 0; i < xs2.n; ++i)
                    for (int ch = 0; ch < cout; ++ch) {
                        const T* g = go.data() + (static_cast<std::size_t>(i) * cout + ch) * ohw;
                        T acc = T(0);
                        for (std::size_t p = 0; p < ohw; ++p) acc += g[p];
                        gb[ch] += acc;
                    }
            }
            if (nx < 0 && nw < 0) return;
            std::vector<T>* gxp = nx >= 0 ? &t.grad_buf(nx) : nullptr;
            std::vector<T>* gwp = nw >= 0 ? &t.grad_buf(nw) : nullptr;
            std::vector<T> cols, gcols;
            const int kk = cing * kh * kw;
            if (!pointwise && !depthwise) {
                cols.resize(static_cast<std::size_t>(kk) * ohw);
                gcols.resize(static_cast<std::size_t>(kk) * ohw);
            }
            for (int i = 0; i < xs2.n; ++i) {
                const T* xi = xv.data() + static_cast<std::size_t>(i) * cin * xs2.h * xs2.w;
                const T* gi = go.data() + static_cast<std::size_t>(i) * cout * ohw;
                if (pointwise) {
                    if (gwp)
                        detail::gemm(false, true, cout, cin, static_cast<int>(ohw), T(1), gi,
                                     static_cast<int>(ohw), xi, static_cast<int>(ohw), T(1),
                                     gwp->data(), cin);
                    if (gxp)
                        detail::gemm(true, false, cin, static_cast<int>(ohw), cout, T(1),
                                     wv.data(), cin, gi, static_cast<int>(ohw), T(1),
                                     gxp->data() + static_cast<std::size_t>(i) * cin * ohw,
                                     static_cast<int>(ohw));
                } else if (depthwise) {
                    for (int ch = 0; ch < cin; ++ch) {
                        const T* xc2 = xi + static_cast<std::size_t>(ch) * xs2.h * xs2.w;
                        const T* gc = gi + static_cast<std::size_t>(ch) * ohw;
                        const T* wc2 = wv.data() + static_cast<std::size_t>(ch) * kh * kw;
                        for (int oy = 0; oy < oh; ++oy) {
                            for (int ox = 0; ox < ow; ++ox) {
                                const T g = gc[oy * ow + ox];
                                if (g == T(0)) continue;
                                for (int ky = 0; ky < kh; ++ky) {
                                    const int iy = oy * stride - padding + ky;
                                    if (iy < 0 || iy >= xs2.h) continue;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        const int ix = ox * stride - padding + kx;
                                        if (ix < 0 || ix >= xs2.w) continue;
                                        if (gwp)
                                            (*gwp)[static_cast<std::size_t>(ch) * kh * kw +
                                                   ky * kw + kx] += g * xc2[iy * xs2.w + ix];
                                        if (gxp)
                                            (*gxp)[(static_cast<std::size_t>(i) * cin + ch) *
                                                       xs2.h * xs2.w +
                                                   iy * xs2.w + ix] += g * wc2[ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                } else {
                    for (int g = 0; g < groups; ++g) {
                        detail::im2col(xi + static_cast<std::size_t>(g) * cing * xs2.h * xs2.w,
                                       cing, xs2.h, xs2.w, kh, kw, stride, padding, cols.data());
                        const T* gg = gi + static_cast<std::size_t>(g) * coutg * ohw;
                        if (gwp)
                            detail::gemm(false, true, coutg, kk, static_cast<int>(ohw), T(1), gg,
                                         static_cast<int>(ohw), cols.data(),
                                         static_cast<int>(ohw), T(1),
                                         gwp->data() + static_cast<std::size_t>(g) * coutg * kk,
                                         kk);
                        if (gxp) {
                            detail::gemm(true, false, kk, static_cast<int>(ohw), coutg, T(1),
                                         wv.data() + static_cast<std::size_t>(g) * coutg * kk, kk,
                                         gg, static_cast<int>(ohw), T(0), gcols.data(),
                                         static_cast<int>(ohw));
                            detail::col2im(gcols.data(), cing, xs2.h, xs2.w, kh, kw, stride,
                                           padding,
                                           gxp->data() +
                                               (static_cast<std::size_t>(i) * cin +
                                                static_cast<std::size_t>(g) * cing) *
                                                   xs2.h * xs2.w);
                        }
                    }
                }
            }
        }));
    }
    return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding, int groups) {
    return conv2d(x, weight, &bias, stride, padding, groups);
}
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, int stride, int padding,
                 int groups) {
    return conv2d(x, weight, static_cast<const Tensor<T>*>(nullptr), stride, padding, groups);
}

// ---------------------------------------------------------------------------
// Pointwise and elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pointwise_unary(const Tensor<T>& x, UnaryKind kind) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        switch (kind) {
            case UnaryKind::Sigmoid:
                for (std::size_t i = 0; i < xv.size(); ++i)
                    o[i] = T(1) / (T(1) + std::exp(-xv[i]));
                break;
            case UnaryKind::Tanh:
                for (std::size_t i = 0; i < xv.size(); ++i) o[i] = std::tanh(xv[i]);
                break;
            case UnaryKind::Relu:
                for (std::size_t i = 0; i < xv.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
                break;
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0) {
            Tensor<T> saved = (kind == UnaryKind::Relu) ? x : out;
            out.bind(tp, tp->push(out.numel(), [nx, kind, saved](Tape<T>& t,
                                                                 const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                const auto& s = saved.data();
                switch (kind) {
                    case UnaryKind::Sigmoid:
                        for (std::size_t i = 0; i < go.size(); ++i)
                            gx[i] += go[i] * s[i] * (T(1) - s[i]);
                        break;
                    case UnaryKind::Tanh:
                        for (std::size_t i = 0; i < go.size(); ++i)
                            gx[i] += go[i] * (T(1) - s[i] * s[i]);
                        break;
                    case UnaryKind::Relu:
                        for (std::size_t i = 0; i < go.size(); ++i)
                            if (s[i] > T(0)) gx[i] += go[i];
                        break;
                }
            }));
        }
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return pointwise_unary(x, UnaryKind::Sigmoid);
}
template <typename T>
Tensor<T> tanh_of(const Tensor<T>& x) {
    return pointwise_unary(x, UnaryKind::Tanh);
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return pointwise_unary(x, UnaryKind::Relu);
}

template <typename T>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
    require(a.shape() == b.shape(), "elementwise op: shape mismatch ", a.shape().str(), " vs ",
            b.shape().str());
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    {
        auto& o = out.mut();
        const auto& av = a.data();
        const auto& bv = b.data();
        switch (kind) {
            case BinaryKind::Add:
                for (std::size_t i = 0; i < av.size(); ++i) o[i] = av[i] + bv[i];
                break;
            case BinaryKind::Sub:
                for (std::size_t i = 0; i < av.size(); ++i) o[i] = av[i] - bv[i];
                break;
            case BinaryKind::Mul:
                for (std::size_t i = 0; i < av.size(); ++i) o[i] = av[i] * bv[i];
                break;
        }
    }
    if (Tape<T>* tp = tape_of<T>({&a, &b})) {
        const int na = a.node(), nb = b.node();
        Tensor<T> ac, bc;
        if (kind == BinaryKind::Mul) {
            ac = a;
            bc = b;
        }
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            switch (kind) {
                case BinaryKind::Add:
                    if (na >= 0) detail::axpy(t.grad_buf(na), go);
                    if (nb >= 0) detail::axpy(t.grad_buf(nb), go);
                    break;
                case BinaryKind::Sub:
                    if (na >= 0) detail::axpy(t.grad_buf(na), go);
                    if (nb >= 0) detail::axpy(t.grad_buf(nb), go, T(-1));
                    break;
                case BinaryKind::Mul:
                    if (na >= 0) {
                        auto& g = t.grad_buf(na);
                        const auto& bv = bc.data();
                        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * bv[i];
                    }
                    if (nb >= 0) {
                        auto& g = t.grad_buf(nb);
                        const auto& av = ac.data();
                        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * av[i];
                    }
                    break;
            }
        }));
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise_binary(a, b, BinaryKind::Add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise_binary(a, b, BinaryKind::Sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise_binary(a, b, BinaryKind::Mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (std::size_t i = 0; i < xv.size(); ++i) o[i] = xv[i] * s;
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s](Tape<T>& t, const std::vector<T>& go) {
                detail::axpy(t.grad_buf(nx), go, s);
            }));
    }
    return out;
}

// Per-(batch, channel) gate multiply: gate shape (n, c, 1, 1).
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gate) {
    const Shape& xs = x.shape();
    require(gate.shape() == Shape{xs.n, xs.c, 1, 1}, "scale_channels: gate shape ",
            gate.shape().str(), " must be (", xs.n, ",", xs.c, ",1,1)");
    const std::size_t hw = static_cast<std::size_t>(xs.h) * xs.w;
    Tensor<T> out = Tensor<T>::zeros(xs);
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        const auto& gv = gate.data();
        for (int i = 0; i < xs.n; ++i)
            for (int ch = 0; ch < xs.c; ++ch) {
                const T g = gv[static_cast<std::size_t>(i) * xs.c + ch];
                const std::size_t base = (static_cast<std::size_t>(i) * xs.c + ch) * hw;
                for (std::size_t p = 0; p < hw; ++p) o[base + p] = xv[base + p] * g;
            }
    }
    if (Tape<T>* tp = tape_of<T>({&x, &gate})) {
        const int nx = x.node(), ng = gate.node();
        Tensor<T> xc = x, gc = gate;
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            const auto& xv = xc.data();
            const auto& gv = gc.data();
            for (int i = 0; i < xs.n; ++i)
                for (int ch = 0; ch < xs.c; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(i) * xs.c + ch) * hw;
                    if (nx >= 0) {
                        auto& gx = t.grad_buf(nx);
                        const T g = gv[static_cast<std::size_t>(i) * xs.c + ch];
                        for (std::size_t p = 0; p < hw; ++p) gx[base + p] += go[base + p] * g;
                    }
                    if (ng >= 0) {
                        T acc = T(0);
                        for (std::size_t p = 0; p < hw; ++p) acc += go[base + p] * xv[base + p];
                        t.grad_buf(ng)[static_cast<std::size_t>(i) * xs.c + ch] += acc;
                    }
                }
        }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / matmul
// ---------------------------------------------------------------------------

// Softmax over the last axis, each (n,c,h) slice treated as one row.
// Max-subtracted for stability.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    require(all_finite(x.data()), "softmax_rows: non-finite input");
    const Shape& s = x.shape();
    const int rows = s.n * s.c * s.h, cols = s.w;
    Tensor<T> out = Tensor<T>::zeros(s);
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int r = 0; r < rows; ++r) {
            const T* row = xv.data() + static_cast<std::size_t>(r) * cols;
            T* orow = o.data() + static_cast<std::size_t>(r) * cols;
            T mx = row[0];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < cols; ++j) {
                orow[j] = std::exp(row[j] - mx);
                sum += orow[j];
            }
            for (int j = 0; j < cols; ++j) orow[j] /= sum;
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0) {
            Tensor<T> y = out;
            out.bind(tp, tp->push(out.numel(), [nx, y, rows, cols](Tape<T>& t,
                                                                   const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                const auto& yv = y.data();
                for (int r = 0; r < rows; ++r) {
                    const std::size_t base = static_cast<std::size_t>(r) * cols;
                    T dot = T(0);
                    for (int j = 0; j < cols; ++j) dot += go[base + j] * yv[base + j];
                    for (int j = 0; j < cols; ++j)
                        gx[base + j] += yv[base + j] * (go[base + j] - dot);
                }
            }));
        }
    }
    return out;
}

// 2-D matrices ride in the (h, w) axes with n = c = 1.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    require(as.n == 1 && as.c == 1 && bs.n == 1 && bs.c == 1 && as.w == bs.h,
            "matmul: incompatible shapes ", as.str(), " x ", bs.str());
    const int m = as.h, k = as.w, n = bs.w;
    Tensor<T> out = Tensor<T>::zeros({1, 1, m, n});
    detail::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
                 out.mut().data(), n);
    if (Tape<T>* tp = tape_of<T>({&a, &b})) {
        const int na = a.node(), nb = b.node();
        Tensor<T> ac = a, bc = b;
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            if (na >= 0)
                detail::gemm(false, true, m, k, n, T(1), go.data(), n, bc.data().data(), n, T(1),
                             t.grad_buf(na).data(), k);
            if (nb >= 0)
                detail::gemm(true, false, k, n, m, T(1), ac.data().data(), k, go.data(), n, T(1),
                             t.grad_buf(nb).data(), n);
        }));
    }
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    const Shape& s = x.shape();
    require(s.n == 1 && s.c == 1, "transpose2d expects a (1,1,m,n) matrix, got ", s.str());
    const int m = s.h, n = s.w;
    Tensor<T> out = Tensor<T>::zeros({1, 1, n, m});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(j) * m + i] = xv[static_cast<std::size_t>(i) * n + j];
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, m, n](Tape<T>& t, const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i)
                        gx[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(j) * m + i];
            }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

// Layernorm across the channel axis at every spatial position (gain/bias per
// channel, shape (1,c,1,1)).
template <typename T>
Tensor<T> layernorm_channels(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    const Shape& s = x.shape();
    require(gain.shape() == Shape{1, s.c, 1, 1} && bias.shape() == gain.shape(),
            "layernorm_channels: gain/bias must be (1,", s.c, ",1,1)");
    const T eps = static_cast<T>(1e-5);
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t cs = hw; // channel stride
    Tensor<T> out = Tensor<T>::zeros(s);
    Tensor<T> xhat = Tensor<T>::zeros(s);
    std::vector<T> istd(static_cast<std::size_t>(s.n) * hw);
    {
        auto& o = out.mut();
        auto& xh = xhat.mut();
        const auto& xv = x.data();
        const auto& gv = gain.data();
        const auto& bv = bias.data();
        for (int i = 0; i < s.n; ++i) {
            const std::size_t nbase = static_cast<std::size_t>(i) * s.c * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                T mu = T(0);
                for (int ch = 0; ch < s.c; ++ch) mu += xv[nbase + ch * cs + p];
                mu /= static_cast<T>(s.c);
                T var = T(0);
                for (int ch = 0; ch < s.c; ++ch) {
                    const T d = xv[nbase + ch * cs + p] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(s.c);
                const T is = T(1) / std::sqrt(var + eps);
                istd[static_cast<std::size_t>(i) * hw + p] = is;
                for (int ch = 0; ch < s.c; ++ch) {
                    const T h = (xv[nbase + ch * cs + p] - mu) * is;
                    xh[nbase + ch * cs + p] = h;
                    o[nbase + ch * cs + p] = h * gv[ch] + bv[ch];
                }
            }
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x, &gain, &bias})) {
        const int nx = x.node(), ng = gain.node(), nb = bias.node();
        Tensor<T> gc = gain;
        out.bind(tp, tp->push(out.numel(), [=, istd = std::move(istd)](
                                               Tape<T>& t, const std::vector<T>& go) {
            const auto& xh = xhat.data();
            const auto& gv = gc.data();
            const T invc = T(1) / static_cast<T>(s.c);
            for (int i = 0; i < s.n; ++i) {
                const std::size_t nbase = static_cast<std::size_t>(i) * s.c * hw;
                for (std::size_t p = 0; p < hw; ++p) {
                    if (ng >= 0) {
                        auto& g = t.grad_buf(ng);
                        for (int ch = 0; ch < s.c; ++ch)
                            g[ch] += go[nbase + ch * cs + p] * xh[nbase + ch * cs + p];
                    }
                    if (nb >= 0) {
                        auto& g = t.grad_buf(nb);
                        for (int ch = 0; ch < s.c; ++ch) g[ch] += go[nbase + ch * cs + p];
                    }
                    if (nx >= 0) {
                        auto& gx = t.grad_buf(nx);
                        T m1 = T(0), m2 = T(0);
                        for (int ch = 0; ch < s.c; ++ch) {
                            const T gh = go[nbase + ch * cs + p] * gv[ch];
                            m1 += gh;
                            m2 += gh * xh[nbase + ch * cs + p];
                        }
                        m1 *= invc;
                        m2 *= invc;
                        const T is = istd[static_cast<std::size_t>(i) * hw + p];
                        for (int ch = 0; ch < s.c; ++ch) {
                            const T gh = go[nbase + ch * cs + p] * gv[ch];
                            gx[nbase + ch * cs + p] +=
                                is * (gh - m1 - xh[nbase + ch * cs + p] * m2);
                        }
                    }
                }
            }
        }));
    }
    return out;
}

template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
    const Shape& s = x.shape();
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    Tensor<T> out = Tensor<T>::zeros({s.n, s.c, 1, 1});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int i = 0; i < s.n * s.c; ++i) {
            T acc = T(0);
            const T* p = xv.data() + static_cast<std::size_t>(i) * hw;
            for (std::size_t j = 0; j < hw; ++j) acc += p[j];
            o[i] = acc / static_cast<T>(hw);
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s, hw](Tape<T>& t, const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                const T inv = T(1) / static_cast<T>(hw);
                for (int i = 0; i < s.n * s.c; ++i) {
                    const T g = go[i] * inv;
                    T* p = gx.data() + static_cast<std::size_t>(i) * hw;
                    for (std::size_t j = 0; j < hw; ++j) p[j] += g;
                }
            }));
    }
    return out;
}

template <typename T>
Tensor<T> avgpool2x(const Tensor<T>& x) {
    const Shape& s = x.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "avgpool2x: spatial dims must be even, got ", s.str());
    const int oh = s.h / 2, ow = s.w / 2;
    Tensor<T> out = Tensor<T>::zeros({s.n, s.c, oh, ow});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int i = 0; i < s.n * s.c; ++i) {
            const T* xi = xv.data() + static_cast<std::size_t>(i) * s.h * s.w;
            T* oi = o.data() + static_cast<std::size_t>(i) * oh * ow;
            for (int y = 0; y < oh; ++y)
                for (int xw = 0; xw < ow; ++xw)
                    oi[y * ow + xw] =
                        (xi[(2 * y) * s.w + 2 * xw] + xi[(2 * y) * s.w + 2 * xw + 1] +
                         xi[(2 * y + 1) * s.w + 2 * xw] + xi[(2 * y + 1) * s.w + 2 * xw + 1]) /
                        T(4);
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s, oh, ow](Tape<T>& t,
                                                               const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (int i = 0; i < s.n * s.c; ++i) {
                    T* gi = gx.data() + static_cast<std::size_t>(i) * s.h * s.w;
                    const T* g = go.data() + static_cast<std::size_t>(i) * oh * ow;
                    for (int y = 0; y < oh; ++y)
                        for (int xw = 0; xw < ow; ++xw) {
                            const T q = g[y * ow + xw] / T(4);
                            gi[(2 * y) * s.w + 2 * xw] += q;
                            gi[(2 * y) * s.w + 2 * xw + 1] += q;
                            gi[(2 * y + 1) * s.w + 2 * xw] += q;
                            gi[(2 * y + 1) * s.w + 2 * xw + 1] += q;
                        }
                }
            }));
    }
    return out;
}

// Bilinear resize with the half-pixel (align-corners = false) convention.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int oh, int ow) {
    const Shape& s = x.shape();
    require(oh >= 1 && ow >= 1, "bilinear_resize: bad output size");
    struct Tap {
        int i0, i1;
        T w0, w1;
    };
    auto make_taps = [](int in, int out) {
        std::vector<Tap> taps(static_cast<std::size_t>(out));
        const double r = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * r - 0.5;
            src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
            const int i0 = static_cast<int>(src);
            const int i1 = std::min(i0 + 1, in - 1);
            const T w1 = static_cast<T>(src - i0);
            taps[static_cast<std::size_t>(o)] = Tap{i0, i1, T(1) - w1, w1};
        }
        return taps;
    };
    const auto ty = make_taps(s.h, oh);
    const auto tx = make_taps(s.w, ow);
    Tensor<T> out = Tensor<T>::zeros({s.n, s.c, oh, ow});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int i = 0; i < s.n * s.c; ++i) {
            const T* xi = xv.data() + static_cast<std::size_t>(i) * s.h * s.w;
            T* oi = o.data() + static_cast<std::size_t>(i) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                const Tap& a = ty[static_cast<std::size_t>(y)];
                for (int xw = 0; xw < ow; ++xw) {
                    const Tap& b = tx[static_cast<std::size_t>(xw)];
                    oi[y * ow + xw] = a.w0 * (b.w0 * xi[a.i0 * s.w + b.i0] +
                                              b.w1 * xi[a.i0 * s.w + b.i1]) +
                                      a.w1 * (b.w0 * xi[a.i1 * s.w + b.i0] +
                                              b.w1 * xi[a.i1 * s.w + b.i1]);
                }
            }
        }
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s, oh, ow, ty, tx](
                                                   Tape<T>& t, const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (int i = 0; i < s.n * s.c; ++i) {
                    T* gi = gx.data() + static_cast<std::size_t>(i) * s.h * s.w;
                    const T* g = go.data() + static_cast<std::size_t>(i) * oh * ow;
                    for (int y = 0; y < oh; ++y) {
                        const auto& a = ty[static_cast<std::size_t>(y)];
                        for (int xw = 0; xw < ow; ++xw) {
                            const auto& b = tx[static_cast<std::size_t>(xw)];
                            const T gv = g[y * ow + xw];
                            gi[a.i0 * s.w + b.i0] += a.w0 * b.w0 * gv;
                            gi[a.i0 * s.w + b.i1] += a.w0 * b.w1 * gv;
                            gi[a.i1 * s.w + b.i0] += a.w1 * b.w0 * gv;
                            gi[a.i1 * s.w + b.i1] += a.w1 * b.w1 * gv;
                        }
                    }
                }
            }));
    }
    return out;
}

template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
    return bilinear_resize(x, x.shape().h * 2, x.shape().w * 2);
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_channels: empty input");
    const Shape& s0 = parts[0].shape();
    int ctot = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.n == s0.n && s.h == s0.h && s.w == s0.w,
                "concat_channels: mismatched shapes ", s.str(), " vs ", s0.str());
        ctot += s.c;
    }
    const std::size_t hw = static_cast<std::size_t>(s0.h) * s0.w;
    Tensor<T> out = Tensor<T>::zeros({s0.n, ctot, s0.h, s0.w});
    {
        auto& o = out.mut();
        for (int i = 0; i < s0.n; ++i) {
            std::size_t coff = 0;
            for (const auto& p : parts) {
                const auto& pv = p.data();
                const std::size_t len = static_cast<std::size_t>(p.shape().c) * hw;
                std::copy_n(pv.data() + static_cast<std::size_t>(i) * len, len,
                            o.data() + (static_cast<std::size_t>(i) * ctot) * hw + coff);
                coff += len;
            }
        }
    }
    Tape<T>* tp = nullptr;
    for (const auto& p : parts) {
        if (!p.tracked()) continue;
        require(!tp || tp == p.tape(), "concat_channels: operands on different tapes");
        tp = p.tape();
    }
    if (tp) {
        std::vector<int> nodes;
        std::vector<int> chans;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            chans.push_back(p.shape().c);
        }
        out.bind(tp, tp->push(out.numel(), [nodes, chans, s0, ctot, hw](
                                               Tape<T>& t, const std::vector<T>& go) {
            for (int i = 0; i < s0.n; ++i) {
                std::size_t coff = 0;
                for (std::size_t k = 0; k < nodes.size(); ++k) {
                    const std::size_t len = static_cast<std::size_t>(chans[k]) * hw;
                    if (nodes[k] >= 0) {
                        auto& g = t.grad_buf(nodes[k]);
                        const T* src = go.data() + (static_cast<std::size_t>(i) * ctot) * hw + coff;
                        T* dst = g.data() + static_cast<std::size_t>(i) * len;
                        for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
                    }
                    coff += len;
                }
            }
        }));
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int count) {
    const Shape& s = x.shape();
    require(c0 >= 0 && count >= 1 && c0 + count <= s.c, "slice_channels: range [", c0, ",",
            c0 + count, ") out of ", s.c);
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    Tensor<T> out = Tensor<T>::zeros({s.n, count, s.h, s.w});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int i = 0; i < s.n; ++i)
            std::copy_n(xv.data() + (static_cast<std::size_t>(i) * s.c + c0) * hw,
                        static_cast<std::size_t>(count) * hw,
                        o.data() + static_cast<std::size_t>(i) * count * hw);
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s, c0, count, hw](Tape<T>& t,
                                                                      const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (int i = 0; i < s.n; ++i) {
                    const T* src = go.data() + static_cast<std::size_t>(i) * count * hw;
                    T* dst = gx.data() + (static_cast<std::size_t>(i) * s.c + c0) * hw;
                    for (std::size_t j = 0; j < static_cast<std::size_t>(count) * hw; ++j)
                        dst[j] += src[j];
                }
            }));
    }
    return out;
}

// Concatenate matrices/token blocks along the h axis.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    const Shape& s0 = parts[0].shape();
    int htot = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.n == s0.n && s.c == s0.c && s.w == s0.w, "concat_rows: mismatched shapes ",
                s.str(), " vs ", s0.str());
        require(s.n == 1 && s.c == 1, "concat_rows expects (1,1,*,w) blocks");
        htot += s.h;
    }
    Tensor<T> out = Tensor<T>::zeros({1, 1, htot, s0.w});
    {
        auto& o = out.mut();
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy_n(p.data().data(), p.data().size(), o.data() + off);
            off += p.data().size();
        }
    }
    Tape<T>* tp = nullptr;
    for (const auto& p : parts) {
        if (!p.tracked()) continue;
        require(!tp || tp == p.tape(), "concat_rows: operands on different tapes");
        tp = p.tape();
    }
    if (tp) {
        std::vector<int> nodes;
        std::vector<std::size_t> lens;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            lens.push_back(p.data().size());
        }
        out.bind(tp, tp->push(out.numel(), [nodes, lens](Tape<T>& t, const std::vector<T>& go) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (nodes[k] >= 0) {
                    auto& g = t.grad_buf(nodes[k]);
                    for (std::size_t j = 0; j < lens[k]; ++j) g[j] += go[off + j];
                }
                off += lens[k];
            }
        }));
    }
    return out;
}

// (1,c,h,w) -> (1,1,h*w,c): one token per spatial position.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    const Shape& s = x.shape();
    require(s.n == 1, "to_tokens expects batch 1, got ", s.str());
    const int hw = s.h * s.w;
    Tensor<T> out = Tensor<T>::zeros({1, 1, hw, s.c});
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        for (int ch = 0; ch < s.c; ++ch)
            for (int p = 0; p < hw; ++p)
                o[static_cast<std::size_t>(p) * s.c + ch] = xv[static_cast<std::size_t>(ch) * hw + p];
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, s, hw](Tape<T>& t, const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (int ch = 0; ch < s.c; ++ch)
                    for (int p = 0; p < hw; ++p)
                        gx[static_cast<std::size_t>(ch) * hw + p] +=
                            go[static_cast<std::size_t>(p) * s.c + ch];
            }));
    }
    return out;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tok, int c, int h, int w) {
    const Shape& s = tok.shape();
    require(s.n == 1 && s.c == 1 && s.h == h * w && s.w == c, "from_tokens: shape ", s.str(),
            " does not match (", c, ",", h, ",", w, ")");
    const int hw = h * w;
    Tensor<T> out = Tensor<T>::zeros({1, c, h, w});
    {
        auto& o = out.mut();
        const auto& tv = tok.data();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                o[static_cast<std::size_t>(ch) * hw + p] = tv[static_cast<std::size_t>(p) * c + ch];
    }
    if (Tape<T>* tp = tape_of<T>({&tok})) {
        const int nt = tok.node();
        if (nt >= 0)
            out.bind(tp, tp->push(out.numel(), [nt, c, hw](Tape<T>& t, const std::vector<T>& go) {
                auto& gt = t.grad_buf(nt);
                for (int ch = 0; ch < c; ++ch)
                    for (int p = 0; p < hw; ++p)
                        gt[static_cast<std::size_t>(p) * c + ch] +=
                            go[static_cast<std::size_t>(ch) * hw + p];
            }));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1, 1, 1, 1});
    {
        T acc = T(0);
        for (T v : x.data()) acc += v;
        out.mut()[0] = acc;
    }
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        if (nx >= 0)
            out.bind(tp, tp->push(1, [nx](Tape<T>& t, const std::vector<T>& go) {
                auto& gx = t.grad_buf(nx);
                for (auto& g : gx) g += go[0];
            }));
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

} // namespace mwnet
