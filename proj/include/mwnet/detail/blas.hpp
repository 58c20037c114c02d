// Row-major GEMM dispatch onto OpenBLAS, plus im2col/col2im buffers for conv2d.
#pragma once

#include <cblas.h>

#include <vector>

#include "mwnet/common.hpp"

namespace mwnet::detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline int conv_out_dim(int in, int pad, int k, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// x: one image (c, h, w) contiguous. cols: (c*kh*kw) x (oh*ow), row-major.
template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, T* cols) {
    const int oh = conv_out_dim(h, pad, kh, stride);
    const int ow = conv_out_dim(w, pad, kw, stride);
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = cols + ((static_cast<std::size_t>(ch) * kh + ky) * kw + kx) *
                                    static_cast<std::size_t>(oh) * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad, T* x) {
    const int oh = conv_out_dim(h, pad, kh, stride);
    const int ow = conv_out_dim(w, pad, kw, stride);
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = cols + ((static_cast<std::size_t>(ch) * kh + ky) * kw + kx) *
                                          static_cast<std::size_t>(oh) * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

} // namespace mwnet::detail
