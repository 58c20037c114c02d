// 2-D discrete wavelet transforms.
//
// Fixed bases (haar / daubechies2 / symlet2) use orthonormal taps with
// periodic extension, so the periodized transform is an orthogonal matrix:
// the inverse equals the adjoint, which is also exactly the autodiff backward
// of the forward pass.
//
// The adaptive transform is a lifting scheme with learnable per-channel
// predictor/updater taps and symmetric boundary extension. Inversion is
// structural: it holds for any finite tap values.
#pragma once

#include <utility>

#include "mwnet/ops.hpp"

namespace mwnet {

enum class WaveletKind { Haar, Daubechies2, Symlet2 };

inline const char* wavelet_name(WaveletKind k) {
    switch (k) {
        case WaveletKind::Haar: return "haar";
        case WaveletKind::Daubechies2: return "daubechies2";
        case WaveletKind::Symlet2: return "symlet2";
    }
    return "?";
}

template <typename T>
struct WaveletBasis {
    WaveletKind kind;
    std::vector<T> lo, hi; // analysis taps; synthesis is the adjoint

    static WaveletBasis make(WaveletKind k) {
        WaveletBasis b;
        b.kind = k;
        switch (k) {
            case WaveletKind::Haar: {
                const double s = 1.0 / std::sqrt(2.0);
                b.lo = {static_cast<T>(s), static_cast<T>(s)};
                break;
            }
            case WaveletKind::Daubechies2:
            case WaveletKind::Symlet2: {
                // symlet2 coincides with daubechies2 at this order
                const double r3 = std::sqrt(3.0), s = 4.0 * std::sqrt(2.0);
                b.lo = {static_cast<T>((1 + r3) / s), static_cast<T>((3 + r3) / s),
                        static_cast<T>((3 - r3) / s), static_cast<T>((1 - r3) / s)};
                break;
            }
        }
        const int L = static_cast<int>(b.lo.size());
        b.hi.resize(static_cast<std::size_t>(L));
        for (int i = 0; i < L; ++i)
            b.hi[static_cast<std::size_t>(i)] =
                (i % 2 == 0 ? T(1) : T(-1)) * b.lo[static_cast<std::size_t>(L - 1 - i)];
        return b;
    }
};

template <typename T>
struct Subbands {
    Tensor<T> ll, lh, hl, hh;
};

namespace detail {

// One periodized analysis pass: x (len even) -> L,H halves written to out
// with strides, so the same routine serves rows and columns.
template <typename T>
void dwt1d(const T* x, int stride_x, int len, const std::vector<T>& lo, const std::vector<T>& hi,
           T* outl, T* outh, int stride_o) {
    const int half = len / 2, L = static_cast<int>(lo.size());
    for (int k = 0; k < half; ++k) {
        T a = T(0), d = T(0);
        for (int j = 0; j < L; ++j) {
            const T v = x[((2 * k + j) % len) * stride_x];
            a += lo[static_cast<std::size_t>(j)] * v;
            d += hi[static_cast<std::size_t>(j)] * v;
        }
        outl[k * stride_o] = a;
        outh[k * stride_o] = d;
    }
}

// Adjoint (= inverse for orthonormal taps) of dwt1d, accumulating into x.
template <typename T>
void idwt1d(const T* inl, const T* inh, int stride_i, int half, const std::vector<T>& lo,
            const std::vector<T>& hi, T* x, int stride_x) {
    const int len = half * 2, L = static_cast<int>(lo.size());
    for (int k = 0; k < len; ++k) x[k * stride_x] = T(0);
    for (int k = 0; k < half; ++k) {
        const T a = inl[k * stride_i], d = inh[k * stride_i];
        for (int j = 0; j < L; ++j)
            x[((2 * k + j) % len) * stride_x] +=
                lo[static_cast<std::size_t>(j)] * a + hi[static_cast<std::size_t>(j)] * d;
    }
}

// Raw packed-kernel passes shared by forward values and backward adjoints.
// Row layout: (n,c,h,w) -> (n,2c,h,w/2), channel blocks [L | H].
template <typename T>
std::vector<T> dwt_rows_raw(const std::vector<T>& x, const Shape& s, const WaveletBasis<T>& b) {
    const int half = s.w / 2;
    std::vector<T> out(static_cast<std::size_t>(s.n) * 2 * s.c * s.h * half);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t oplane = static_cast<std::size_t>(s.h) * half;
    for (int i = 0; i < s.n; ++i)
        for (int ch = 0; ch < s.c; ++ch)
            for (int y = 0; y < s.h; ++y) {
                const T* row = x.data() + (static_cast<std::size_t>(i) * s.c + ch) * plane +
                               static_cast<std::size_t>(y) * s.w;
                T* ol = out.data() + (static_cast<std::size_t>(i) * 2 * s.c + ch) * oplane +
                        static_cast<std::size_t>(y) * half;
                T* oh = out.data() + (static_cast<std::size_t>(i) * 2 * s.c + s.c + ch) * oplane +
                        static_cast<std::size_t>(y) * half;
                dwt1d(row, 1, s.w, b.lo, b.hi, ol, oh, 1);
            }
    return out;
}

template <typename T>
std::vector<T> idwt_rows_raw(const std::vector<T>& p, const Shape& ps, const WaveletBasis<T>& b) {
    const int c = ps.c / 2, w = ps.w * 2;
    std::vector<T> out(static_cast<std::size_t>(ps.n) * c * ps.h * w);
    const std::size_t plane = static_cast<std::size_t>(ps.h) * ps.w;
    const std::size_t oplane = static_cast<std::size_t>(ps.h) * w;
    for (int i = 0; i < ps.n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < ps.h; ++y) {
                const T* il = p.data() + (static_cast<std::size_t>(i) * ps.c + ch) * plane +
                              static_cast<std::size_t>(y) * ps.w;
                const T* ih = p.data() + (static_cast<std::size_t>(i) * ps.c + c + ch) * plane +
                              static_cast<std::size_t>(y) * ps.w;
                T* row = out.data() + (static_cast<std::size_t>(i) * c + ch) * oplane +
                         static_cast<std::size_t>(y) * w;
                idwt1d(il, ih, 1, ps.w, b.lo, b.hi, row, 1);
            }
    return out;
}

template <typename T>
std::vector<T> dwt_cols_raw(const std::vector<T>& x, const Shape& s, const WaveletBasis<T>& b) {
    const int half = s.h / 2;
    std::vector<T> out(static_cast<std::size_t>(s.n) * 2 * s.c * half * s.w);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t oplane = static_cast<std::size_t>(half) * s.w;
    for (int i = 0; i < s.n; ++i)
        for (int ch = 0; ch < s.c; ++ch)
            for (int xw = 0; xw < s.w; ++xw) {
                const T* col = x.data() + (static_cast<std::size_t>(i) * s.c + ch) * plane + xw;
                T* ol = out.data() + (static_cast<std::size_t>(i) * 2 * s.c + ch) * oplane + xw;
                T* oh =
                    out.data() + (static_cast<std::size_t>(i) * 2 * s.c + s.c + ch) * oplane + xw;
                dwt1d(col, s.w, s.h, b.lo, b.hi, ol, oh, s.w);
            }
    return out;
}

template <typename T>
std::vector<T> idwt_cols_raw(const std::vector<T>& p, const Shape& ps, const WaveletBasis<T>& b) {
    const int c = ps.c / 2, h = ps.h * 2;
    std::vector<T> out(static_cast<std::size_t>(ps.n) * c * h * ps.w);
    const std::size_t plane = static_cast<std::size_t>(ps.h) * ps.w;
    const std::size_t oplane = static_cast<std::size_t>(h) * ps.w;
    for (int i = 0; i < ps.n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int xw = 0; xw < ps.w; ++xw) {
                const T* il = p.data() + (static_cast<std::size_t>(i) * ps.c + ch) * plane + xw;
                const T* ih =
                    p.data() + (static_cast<std::size_t>(i) * ps.c + c + ch) * plane + xw;
                T* col = out.data() + (static_cast<std::size_t>(i) * c + ch) * oplane + xw;
                idwt1d(il, ih, ps.w, ps.h, b.lo, b.hi, col, ps.w);
            }
    return out;
}

} // namespace detail

// (n,c,h,w) -> (n,2c,h,w/2) packed [L | H]; linear, orthogonal per row.
template <typename T>
Tensor<T> dwt_rows(const Tensor<T>& x, const WaveletBasis<T>& basis) {
    const Shape& s = x.shape();
    require(s.w % 2 == 0, "dwt_rows: width must be even, got ", s.str());
    Tensor<T> out({s.n, 2 * s.c, s.h, s.w / 2}, detail::dwt_rows_raw(x.data(), s, basis));
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        const Shape os = out.shape();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, os, basis](Tape<T>& t,
                                                               const std::vector<T>& go) {
                detail::axpy(t.grad_buf(nx), detail::idwt_rows_raw(go, os, basis));
            }));
    }
    return out;
}

template <typename T>
Tensor<T> idwt_rows(const Tensor<T>& p, const WaveletBasis<T>& basis) {
    const Shape& s = p.shape();
    require(s.c % 2 == 0, "idwt_rows: packed channel count must be even");
    Tensor<T> out({s.n, s.c / 2, s.h, s.w * 2}, detail::idwt_rows_raw(p.data(), s, basis));
    if (Tape<T>* tp = tape_of<T>({&p})) {
        const int np = p.node();
        const Shape os = out.shape();
        if (np >= 0)
            out.bind(tp, tp->push(out.numel(), [np, os, basis](Tape<T>& t,
                                                               const std::vector<T>& go) {
                detail::axpy(t.grad_buf(np), detail::dwt_rows_raw(go, os, basis));
            }));
    }
    return out;
}

template <typename T>
Tensor<T> dwt_cols(const Tensor<T>& x, const WaveletBasis<T>& basis) {
    const Shape& s = x.shape();
    require(s.h % 2 == 0, "dwt_cols: height must be even, got ", s.str());
    Tensor<T> out({s.n, 2 * s.c, s.h / 2, s.w}, detail::dwt_cols_raw(x.data(), s, basis));
    if (Tape<T>* tp = tape_of<T>({&x})) {
        const int nx = x.node();
        const Shape os = out.shape();
        if (nx >= 0)
            out.bind(tp, tp->push(out.numel(), [nx, os, basis](Tape<T>& t,
                                                               const std::vector<T>& go) {
                detail::axpy(t.grad_buf(nx), detail::idwt_cols_raw(go, os, basis));
            }));
    }
    return out;
}

template <typename T>
Tensor<T> idwt_cols(const Tensor<T>& p, const WaveletBasis<T>& basis) {
    const Shape& s = p.shape();
    require(s.c % 2 == 0, "idwt_cols: packed channel count must be even");
    Tensor<T> out({s.n, s.c / 2, s.h * 2, s.w}, detail::idwt_cols_raw(p.data(), s, basis));
    if (Tape<T>* tp = tape_of<T>({&p})) {
        const int np = p.node();
        const Shape os = out.shape();
        if (np >= 0)
            out.bind(tp, tp->push(out.numel(), [np, os, basis](Tape<T>& t,
                                                               const std::vector<T>& go) {
                detail::axpy(t.grad_buf(np), detail::dwt_cols_raw(go, os, basis));
            }));
    }
    return out;
}

// One 2-D level: rows then columns. LH carries horizontal detail (row
// highpass, column lowpass), HL vertical detail.
template <typename T>
Subbands<T> wt2(const Tensor<T>& x, const WaveletBasis<T>& basis) {
    const Shape& s = x.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "wt2: spatial dims must be even, got ", s.str());
    Tensor<T> p = dwt_cols(dwt_rows(x, basis), basis);
    const int c = s.c;
    return Subbands<T>{slice_channels(p, 0, c), slice_channels(p, c, c),
                       slice_channels(p, 2 * c, c), slice_channels(p, 3 * c, c)};
}

template <typename T>
Tensor<T> iwt2(const Subbands<T>& sb, const WaveletBasis<T>& basis) {
    const Shape& s = sb.ll.shape();
    require(sb.lh.shape() == s && sb.hl.shape() == s && sb.hh.shape() == s,
            "iwt2: subband shape mismatch");
    Tensor<T> p = concat_channels<T>({sb.ll, sb.lh, sb.hl, sb.hh});
    return idwt_rows(idwt_cols(p, basis), basis);
}

// ---------------------------------------------------------------------------
// Lifting scheme (adaptive wavelet transform)
// ---------------------------------------------------------------------------

template <typename T>
struct LiftingParams {
    Tensor<T> predictor; // (1, c, 1, k)
    Tensor<T> updater;   // (1, c, 1, k)

    int channels() const { return predictor.shape().c; }
    int taps() const { return predictor.shape().w; }

    // Haar-equivalent start: H = odd - even, L = even + H/2.
    static LiftingParams haar_init(int channels, int k = 3) {
        require(k >= 1 && k % 2 == 1, "lifting taps must have odd length");
        LiftingParams p;
        p.predictor = Tensor<T>::zeros({1, channels, 1, k});
        p.updater = Tensor<T>::zeros({1, channels, 1, k});
        auto& pv = p.predictor.mut();
        auto& uv = p.updater.mut();
        for (int ch = 0; ch < channels; ++ch) {
            pv[static_cast<std::size_t>(ch) * k + k / 2] = T(1);
            uv[static_cast<std::size_t>(ch) * k + k / 2] = T(0.5);
        }
        return p;
    }
};

namespace detail {

// Half-sample symmetric index: ..., x[1], x[0] | x[0..m-1] | x[m-1], x[m-2], ...
inline int reflect(int i, int m) {
    if (m == 1) return 0;
    while (i < 0 || i >= m) {
        if (i < 0) i = -i - 1;
        if (i >= m) i = 2 * m - 1 - i;
    }
    return i;
}

// y[i] = sum_j taps[j] * x[reflect(i + j - k/2)]
template <typename T>
void lift_conv(const T* x, int m, const T* taps, int k, T* y) {
    const int c = k / 2;
    for (int i = 0; i < m; ++i) {
        T acc = T(0);
        for (int j = 0; j < k; ++j) acc += taps[j] * x[reflect(i + j - c, m)];
        y[i] = acc;
    }
}

// acc[reflect(i + j - k/2)] += taps[j] * v[i]  (adjoint of lift_conv)
template <typename T>
void lift_conv_adjoint(const T* v, int m, const T* taps, int k, T* acc) {
    const int c = k / 2;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) acc[reflect(i + j - c, m)] += taps[j] * v[i];
}

// gtaps[j] += sum_i v[i] * x[reflect(i + j - k/2)]
template <typename T>
void lift_tap_grad(const T* v, const T* x, int m, int k, T sign, T* gtaps) {
    const int c = k / 2;
    for (int j = 0; j < k; ++j) {
        T acc = T(0);
        for (int i = 0; i < m; ++i) acc += v[i] * x[reflect(i + j - c, m)];
        gtaps[j] += sign * acc;
    }
}

// Forward lift of one signal: L,H from strided x.
template <typename T>
void lift1d_fwd(const T* x, int stride, int len, const T* p, const T* u, int k, T* L, T* H,
                T* escratch) {
    const int m = len / 2;
    for (int j = 0; j < m; ++j) escratch[j] = x[(2 * j) * stride];
    for (int j = 0; j < m; ++j) H[j] = x[(2 * j + 1) * stride];
    std::vector<T> pe(static_cast<std::size_t>(m));
    lift_conv(escratch, m, p, k, pe.data());
    for (int j = 0; j < m; ++j) H[j] -= pe[j];
    lift_conv(H, m, u, k, pe.data());
    for (int j = 0; j < m; ++j) L[j] = escratch[j] + pe[j];
}

template <typename T>
void lift1d_inv(const T* L, const T* H, int m, const T* p, const T* u, int k, T* x, int stride) {
    std::vector<T> e(static_cast<std::size_t>(m)), tmp(static_cast<std::size_t>(m));
    lift_conv(H, m, u, k, tmp.data());
    for (int j = 0; j < m; ++j) e[j] = L[j] - tmp[j];
    lift_conv(e.data(), m, p, k, tmp.data());
    for (int j = 0; j < m; ++j) {
        x[(2 * j) * stride] = e[j];
        x[(2 * j + 1) * stride] = H[j] + tmp[j];
    }
}

} // namespace detail

// Parity split of a 1-D signal.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> lift_split(const std::vector<T>& x) {
    require(x.size() % 2 == 0, "lift_split: length must be even, got ", x.size());
    std::vector<T> e(x.size() / 2), o(x.size() / 2);
    for (std::size_t j = 0; j < e.size(); ++j) {
        e[j] = x[2 * j];
        o[j] = x[2 * j + 1];
    }
    return {std::move(e), std::move(o)};
}

// Single-channel reference forms. H = odd - P(even); L = even + U(H).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> lift_forward_1d(const std::vector<T>& x,
                                                          const std::vector<T>& p,
                                                          const std::vector<T>& u) {
    require(x.size() % 2 == 0, "lift_forward_1d: length must be even");
    require(p.size() == u.size() && p.size() % 2 == 1, "lift_forward_1d: odd tap count required");
    const int m = static_cast<int>(x.size() / 2);
    std::vector<T> L(static_cast<std::size_t>(m)), H(static_cast<std::size_t>(m)),
        e(static_cast<std::size_t>(m));
    detail::lift1d_fwd(x.data(), 1, static_cast<int>(x.size()), p.data(), u.data(),
                       static_cast<int>(p.size()), L.data(), H.data(), e.data());
    return {std::move(L), std::move(H)};
}

template <typename T>
std::vector<T> lift_inverse_1d(const std::vector<T>& L, const std::vector<T>& H,
                               const std::vector<T>& p, const std::vector<T>& u) {
    require(L.size() == H.size(), "lift_inverse_1d: length mismatch ", L.size(), " vs ",
            H.size());
    require(p.size() == u.size() && p.size() % 2 == 1, "lift_inverse_1d: odd tap count required");
    std::vector<T> x(L.size() * 2);
    detail::lift1d_inv(L.data(), H.data(), static_cast<int>(L.size()), p.data(), u.data(),
                       static_cast<int>(p.size()), x.data(), 1);
    return x;
}

namespace detail {

// Shared per-signal iteration for the tensor lifting ops. `along_w` selects
// rows (stride 1) or columns (stride w).
struct LiftGeom {
    int n, c, len, count, stride; // count = signals per (n,c) plane
    std::size_t plane;            // input plane size
};

inline LiftGeom lift_geom(const Shape& s, bool along_w) {
    LiftGeom g;
    g.n = s.n;
    g.c = s.c;
    g.len = along_w ? s.w : s.h;
    g.count = along_w ? s.h : s.w;
    g.stride = along_w ? 1 : s.w;
    g.plane = static_cast<std::size_t>(s.h) * s.w;
    return g;
}

} // namespace detail

// Lifting along an axis: (n,c,h,w) -> (n,2c,...) packed [L | H]. Differentiable
// in the signal and in both tap sets. Tap channels tc must divide c; packed
// channel j uses tap channel j % tc.
template <typename T>
Tensor<T> lift_axis(const Tensor<T>& x, const LiftingParams<T>& lp, bool along_w) {
    const Shape& s = x.shape();
    const int len = along_w ? s.w : s.h;
    require(len % 2 == 0, "lift: transform length must be even, got ", s.str());
    const int tc = lp.channels(), k = lp.taps();
    require(s.c % tc == 0, "lift: channel count ", s.c, " not divisible by tap channels ", tc);
    const int m = len / 2;
    const Shape os = along_w ? Shape{s.n, 2 * s.c, s.h, m} : Shape{s.n, 2 * s.c, m, s.w};
    const auto g = detail::lift_geom(s, along_w);
    const std::size_t oplane = static_cast<std::size_t>(os.h) * os.w;
    const int ostride = along_w ? 1 : os.w;

    Tensor<T> out = Tensor<T>::zeros(os);
    {
        auto& o = out.mut();
        const auto& xv = x.data();
        const auto& pv = lp.predictor.data();
        const auto& uv = lp.updater.data();
        std::vector<T> L(static_cast<std::size_t>(m)), H(static_cast<std::size_t>(m)),
            e(static_cast<std::size_t>(m));
        for (int i = 0; i < g.n; ++i)
            for (int ch = 0; ch < g.c; ++ch) {
                const T* taps_p = pv.data() + static_cast<std::size_t>(ch % tc) * k;
                const T* taps_u = uv.data() + static_cast<std::size_t>(ch % tc) * k;
                for (int r = 0; r < g.count; ++r) {
                    const std::size_t ibase = (static_cast<std::size_t>(i) * g.c + ch) * g.plane +
                                              (along_w ? static_cast<std::size_t>(r) * s.w
                                                       : static_cast<std::size_t>(r));
                    detail::lift1d_fwd(xv.data() + ibase, g.stride, len, taps_p, taps_u, k,
                                       L.data(), H.data(), e.data());
                    const std::size_t lbase =
                        (static_cast<std::size_t>(i) * 2 * g.c + ch) * oplane +
                        (along_w ? static_cast<std::size_t>(r) * os.w
                                 : static_cast<std::size_t>(r));
                    const std::size_t hbase =
                        (static_cast<std::size_t>(i) * 2 * g.c + g.c + ch) * oplane +
                        (along_w ? static_cast<std::size_t>(r) * os.w
                                 : static_cast<std::size_t>(r));
                    for (int j = 0; j < m; ++j) {
                        o[lbase + static_cast<std::size_t>(j) * ostride] = L[j];
                        o[hbase + static_cast<std::size_t>(j) * ostride] = H[j];
                    }
                }
            }
    }

    Tape<T>* tp = tape_of<T>({&x, &lp.predictor, &lp.updater});
    if (tp) {
        const int nx = x.node(), np = lp.predictor.node(), nu = lp.updater.node();
        Tensor<T> xc = x, pc = lp.predictor, uc = lp.updater, oc = out;
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            const auto& xv = xc.data();
            const auto& pv = pc.data();
            const auto& uv = uc.data();
            const auto& ov = oc.data();
            std::vector<T>* gx = nx >= 0 ? &t.grad_buf(nx) : nullptr;
            std::vector<T>* gp = np >= 0 ? &t.grad_buf(np) : nullptr;
            std::vector<T>* gu = nu >= 0 ? &t.grad_buf(nu) : nullptr;
            std::vector<T> gL(static_cast<std::size_t>(m)), gH(static_cast<std::size_t>(m)),
                dH(static_cast<std::size_t>(m)), ge(static_cast<std::size_t>(m)),
                e(static_cast<std::size_t>(m)), H(static_cast<std::size_t>(m));
            for (int i = 0; i < g.n; ++i)
                for (int ch = 0; ch < g.c; ++ch) {
                    const T* taps_p = pv.data() + static_cast<std::size_t>(ch % tc) * k;
                    const T* taps_u = uv.data() + static_cast<std::size_t>(ch % tc) * k;
                    for (int r = 0; r < g.count; ++r) {
                        const std::size_t ibase =
                            (static_cast<std::size_t>(i) * g.c + ch) * g.plane +
                            (along_w ? static_cast<std::size_t>(r) * s.w
                                     : static_cast<std::size_t>(r));
                        const std::size_t lbase =
                            (static_cast<std::size_t>(i) * 2 * g.c + ch) * oplane +
                            (along_w ? static_cast<std::size_t>(r) * os.w
                                     : static_cast<std::size_t>(r));
                        const std::size_t hbase =
                            (static_cast<std::size_t>(i) * 2 * g.c + g.c + ch) * oplane +
                            (along_w ? static_cast<std::size_t>(r) * os.w
                                     : static_cast<std::size_t>(r));
                        for (int j = 0; j < m; ++j) {
                            gL[j] = go[lbase + static_cast<std::size_t>(j) * ostride];
                            gH[j] = go[hbase + static_cast<std::size_t>(j) * ostride];
                            e[j] = xv[ibase + static_cast<std::size_t>(2 * j) * g.stride];
                            H[j] = ov[hbase + static_cast<std::size_t>(j) * ostride];
                        }
                        // L = e + U(H); H = o - P(e)
                        std::copy(gH.begin(), gH.end(), dH.begin());
                        detail::lift_conv_adjoint(gL.data(), m, taps_u, k, dH.data());
                        std::copy(gL.begin(), gL.end(), ge.begin());
                        {
                            std::vector<T> tmp(static_cast<std::size_t>(m), T(0));
                            detail::lift_conv_adjoint(dH.data(), m, taps_p, k, tmp.data());
                            for (int j = 0; j < m; ++j) ge[j] -= tmp[j];
                        }
                        if (gx)
                            for (int j = 0; j < m; ++j) {
                                (*gx)[ibase + static_cast<std::size_t>(2 * j) * g.stride] +=
                                    ge[j];
                                (*gx)[ibase + static_cast<std::size_t>(2 * j + 1) * g.stride] +=
                                    dH[j];
                            }
                        if (gu)
                            detail::lift_tap_grad(gL.data(), H.data(), m, k, T(1),
                                                  gu->data() +
                                                      static_cast<std::size_t>(ch % tc) * k);
                        if (gp)
                            detail::lift_tap_grad(dH.data(), e.data(), m, k, T(-1),
                                                  gp->data() +
                                                      static_cast<std::size_t>(ch % tc) * k);
                    }
                }
        }));
    }
    return out;
}

// Inverse lift along an axis: (n,2c,...) packed [L | H] -> (n,c,h,w).
template <typename T>
Tensor<T> ilift_axis(const Tensor<T>& p, const LiftingParams<T>& lp, bool along_w) {
    const Shape& s = p.shape();
    require(s.c % 2 == 0, "ilift: packed channel count must be even");
    const int c = s.c / 2;
    const int m = along_w ? s.w : s.h;
    const int tc = lp.channels(), k = lp.taps();
    require(c % tc == 0, "ilift: channel count ", c, " not divisible by tap channels ", tc);
    const Shape os = along_w ? Shape{s.n, c, s.h, 2 * m} : Shape{s.n, c, 2 * m, s.w};
    const std::size_t iplane = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t oplane = static_cast<std::size_t>(os.h) * os.w;
    const int istride = along_w ? 1 : s.w;
    const int ostride = along_w ? 1 : os.w;
    const int count = along_w ? s.h : s.w;

    Tensor<T> out = Tensor<T>::zeros(os);
    {
        auto& o = out.mut();
        const auto& Pv = p.data();
        const auto& pv = lp.predictor.data();
        const auto& uv = lp.updater.data();
        std::vector<T> L(static_cast<std::size_t>(m)), H(static_cast<std::size_t>(m));
        for (int i = 0; i < s.n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const T* taps_p = pv.data() + static_cast<std::size_t>(ch % tc) * k;
                const T* taps_u = uv.data() + static_cast<std::size_t>(ch % tc) * k;
                for (int r = 0; r < count; ++r) {
                    const std::size_t lbase = (static_cast<std::size_t>(i) * s.c + ch) * iplane +
                                              (along_w ? static_cast<std::size_t>(r) * s.w
                                                       : static_cast<std::size_t>(r));
                    const std::size_t hbase =
                        (static_cast<std::size_t>(i) * s.c + c + ch) * iplane +
                        (along_w ? static_cast<std::size_t>(r) * s.w
                                 : static_cast<std::size_t>(r));
                    const std::size_t obase = (static_cast<std::size_t>(i) * c + ch) * oplane +
                                              (along_w ? static_cast<std::size_t>(r) * os.w
                                                       : static_cast<std::size_t>(r));
                    for (int j = 0; j < m; ++j) {
                        L[j] = Pv[lbase + static_cast<std::size_t>(j) * istride];
                        H[j] = Pv[hbase + static_cast<std::size_t>(j) * istride];
                    }
                    detail::lift1d_inv(L.data(), H.data(), m, taps_p, taps_u, k,
                                       o.data() + obase, ostride);
                }
            }
    }

    Tape<T>* tp = tape_of<T>({&p, &lp.predictor, &lp.updater});
    if (tp) {
        const int nP = p.node(), np = lp.predictor.node(), nu = lp.updater.node();
        Tensor<T> Pc = p, pc = lp.predictor, uc = lp.updater, oc = out;
        out.bind(tp, tp->push(out.numel(), [=](Tape<T>& t, const std::vector<T>& go) {
            const auto& Pv = Pc.data();
            const auto& pv = pc.data();
            const auto& uv = uc.data();
            const auto& ov = oc.data();
            std::vector<T>* gP = nP >= 0 ? &t.grad_buf(nP) : nullptr;
            std::vector<T>* gp = np >= 0 ? &t.grad_buf(np) : nullptr;
            std::vector<T>* gu = nu >= 0 ? &t.grad_buf(nu) : nullptr;
            std::vector<T> ge(static_cast<std::size_t>(m)), go_odd(static_cast<std::size_t>(m)),
                dE(static_cast<std::size_t>(m)), gH(static_cast<std::size_t>(m)),
                e(static_cast<std::size_t>(m)), H(static_cast<std::size_t>(m));
            for (int i = 0; i < s.n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const T* taps_p = pv.data() + static_cast<std::size_t>(ch % tc) * k;
                    const T* taps_u = uv.data() + static_cast<std::size_t>(ch % tc) * k;
                    for (int r = 0; r < count; ++r) {
                        const std::size_t lbase =
                            (static_cast<std::size_t>(i) * s.c + ch) * iplane +
                            (along_w ? static_cast<std::size_t>(r) * s.w
                                     : static_cast<std::size_t>(r));
                        const std::size_t hbase =
                            (static_cast<std::size_t>(i) * s.c + c + ch) * iplane +
                            (along_w ? static_cast<std::size_t>(r) * s.w
                                     : static_cast<std::size_t>(r));
                        const std::size_t obase =
                            (static_cast<std::size_t>(i) * c + ch) * oplane +
                            (along_w ? static_cast<std::size_t>(r) * os.w
                                     : static_cast<std::size_t>(r));
                        for (int j = 0; j < m; ++j) {
                            ge[j] = go[obase + static_cast<std::size_t>(2 * j) * ostride];
                            go_odd[j] = go[obase + static_cast<std::size_t>(2 * j + 1) * ostride];
                            e[j] = ov[obase + static_cast<std::size_t>(2 * j) * ostride];
                            H[j] = Pv[hbase + static_cast<std::size_t>(j) * istride];
                        }
                        // e = L - U(H); o = H + P(e)
                        std::copy(ge.begin(), ge.end(), dE.begin());
                        detail::lift_conv_adjoint(go_odd.data(), m, taps_p, k, dE.data());
                        std::copy(go_odd.begin(), go_odd.end(), gH.begin());
                        {
                            std::vector<T> tmp(static_cast<std::size_t>(m), T(0));
                            detail::lift_conv_adjoint(dE.data(), m, taps_u, k, tmp.data());
                            for (int j = 0; j < m; ++j) gH[j] -= tmp[j];
                        }
                        if (gP)
                            for (int j = 0; j < m; ++j) {
                                (*gP)[lbase + static_cast<std::size_t>(j) * istride] += dE[j];
                                (*gP)[hbase + static_cast<std::size_t>(j) * istride] += gH[j];
                            }
                        if (gp)
                            detail::lift_tap_grad(go_odd.data(), e.data(), m, k, T(1),
                                                  gp->data() +
                                                      static_cast<std::size_t>(ch % tc) * k);
                        if (gu)
                            detail::lift_tap_grad(dE.data(), H.data(), m, k, T(-1),
                                                  gu->data() +
                                                      static_cast<std::size_t>(ch % tc) * k);
                    }
                }
        }));
    }
    return out;
}

// 2-D adaptive transform: horizontal lifting, then vertical lifting of both
// halves. Same subband layout as wt2.
template <typename T>
Subbands<T> awt2(const Tensor<T>& x, const LiftingParams<T>& ph, const LiftingParams<T>& pv) {
    const Shape& s = x.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "awt2: spatial dims must be even, got ", s.str());
    Tensor<T> p = lift_axis(lift_axis(x, ph, true), pv, false);
    const int c = s.c;
    return Subbands<T>{slice_channels(p, 0, c), slice_channels(p, c, c),
                       slice_channels(p, 2 * c, c), slice_channels(p, 3 * c, c)};
}

template <typename T>
Tensor<T> iawt2(const Subbands<T>& sb, const LiftingParams<T>& ph, const LiftingParams<T>& pv) {
    const Shape& s = sb.ll.shape();
    require(sb.lh.shape() == s && sb.hl.shape() == s && sb.hh.shape() == s,
            "iawt2: subband shape mismatch");
    Tensor<T> p = concat_channels<T>({sb.ll, sb.lh, sb.hl, sb.hh});
    return ilift_axis(ilift_axis(p, pv, false), ph, true);
}

} // namespace mwnet
