#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "teocc/grid.hpp"
#include "teocc/parallel.hpp"
#include "teocc/tensor.hpp"

namespace teocc {
namespace nn {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
template <typename T>
using EStrideMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ECStrideMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

inline int floor_div(int a, int b) {
    int q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

inline int ceil_div(int a, int b) { return floor_div(a + b - 1, b); }

// ---------------------------------------------------------------------------
// Convolution with ceil-mode output and symmetric zero padding
// ---------------------------------------------------------------------------

struct ConvGeom {
    int ci = 0, co = 0;
    std::array<int, 3> k{1, 1, 1};
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> in{1, 1, 1};
    std::array<int, 3> out{1, 1, 1};
    std::array<int, 3> pad_lo{0, 0, 0};

    std::int64_t in_voxels() const { return std::int64_t(in[0]) * in[1] * in[2]; }
    std::int64_t out_voxels() const { return std::int64_t(out[0]) * out[1] * out[2]; }
    int patch_rows() const { return ci * k[0] * k[1] * k[2]; }
};

/// out = ceil(in / stride); pad chosen symmetric (extra cell on the high side).
inline ConvGeom conv_geom(int ci, int co, std::array<int, 3> k, std::array<int, 3> stride,
                          std::array<int, 3> in) {
    ConvGeom g;
    g.ci = ci;
    g.co = co;
    g.k = k;
    g.stride = stride;
    g.in = in;
    for (int a = 0; a < 3; ++a) {
        if (in[a] <= 0) throw std::invalid_argument("conv: empty spatial input");
        g.out[a] = (in[a] + stride[a] - 1) / stride[a];
        const int total = (g.out[a] - 1) * stride[a] + k[a] - in[a];
        g.pad_lo[a] = std::max(0, total) / 2;
    }
    return g;
}

namespace detail {

inline bool unit_stride(const ConvGeom& g) {
    return g.stride == std::array<int, 3>{1, 1, 1};
}

// For unit-stride convolutions every patch row equals the input shifted by a
// constant linear offset, with zeros where the shifted (x,y,z) decomposition
// leaves the volume. One bulk copy per row plus boundary zeroing.
template <typename T>
void im2col_unit_row(const T* xc, const ConvGeom& g, int x0, int x1, int kx, int ky, int kz,
                     T* dst) {
    const int X = g.in[0], Y = g.in[1], Z = g.in[2];
    const std::int64_t plane = std::int64_t(Y) * Z;
    const std::int64_t cols = std::int64_t(x1 - x0) * plane;
    const int dx = kx - g.pad_lo[0], dy = ky - g.pad_lo[1], dz = kz - g.pad_lo[2];
    const std::int64_t off = (std::int64_t(x0) + dx) * plane + std::int64_t(dy) * Z + dz;
    // Clip the bulk copy to the channel's storage.
    const std::int64_t lo = std::max<std::int64_t>(0, -off);
    const std::int64_t hi = std::min<std::int64_t>(cols, std::int64_t(X) * plane - off);
    if (lo > 0) std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(std::min(lo, cols)));
    if (hi > lo)
        std::memcpy(dst + lo, xc + off + lo, sizeof(T) * static_cast<std::size_t>(hi - lo));
    if (hi < cols)
        std::memset(dst + std::max<std::int64_t>(hi, 0), 0,
                    sizeof(T) * static_cast<std::size_t>(cols - std::max<std::int64_t>(hi, 0)));
    // Zero positions whose shifted x/y/z index wrapped out of range.
    for (int xo = x0; xo < x1; ++xo) {
        T* px = dst + std::int64_t(xo - x0) * plane;
        const int xi = xo + dx;
        if (xi < 0 || xi >= X) {
            std::memset(px, 0, sizeof(T) * static_cast<std::size_t>(plane));
            continue;
        }
        if (dy < 0)
            std::memset(px, 0, sizeof(T) * static_cast<std::size_t>(-dy) * Z);
        else if (dy > 0)
            std::memset(px + (std::int64_t(Y) - dy) * Z, 0,
                        sizeof(T) * static_cast<std::size_t>(dy) * Z);
        if (dz != 0) {
            const int ylo = std::max(0, -dy), yhi = Y - std::max(0, dy);
            if (dz < 0)
                for (int yo = ylo; yo < yhi; ++yo)
                    for (int z = 0; z < -dz; ++z) px[std::int64_t(yo) * Z + z] = T(0);
            else
                for (int yo = ylo; yo < yhi; ++yo)
                    for (int z = 0; z < dz; ++z) px[std::int64_t(yo) * Z + (Z - 1 - z)] = T(0);
        }
    }
}

template <typename T>
void im2col_unit(const T* x, const ConvGeom& g, int x0, int x1, T* col) {
    const std::int64_t cols = std::int64_t(x1 - x0) * g.out[1] * g.out[2];
    std::int64_t r = 0;
    for (int ci = 0; ci < g.ci; ++ci) {
        const T* xc = x + std::int64_t(ci) * g.in_voxels();
        for (int kx = 0; kx < g.k[0]; ++kx)
            for (int ky = 0; ky < g.k[1]; ++ky)
                for (int kz = 0; kz < g.k[2]; ++kz, ++r)
                    im2col_unit_row(xc, g, x0, x1, kx, ky, kz, col + r * cols);
    }
}

// Transpose of im2col_unit: zero the wrapped entries of the patch row, then a
// single vectorized accumulate into the shifted input gradient.
template <typename T>
void col2im_unit_add(T* col, const ConvGeom& g, int x0, int x1, T* dx) {
    const int X = g.in[0], Y = g.in[1], Z = g.in[2];
    const std::int64_t plane = std::int64_t(Y) * Z;
    const std::int64_t cols = std::int64_t(x1 - x0) * plane;
    std::int64_t r = 0;
    for (int ci = 0; ci < g.ci; ++ci) {
        T* xc = dx + std::int64_t(ci) * g.in_voxels();
        for (int kx = 0; kx < g.k[0]; ++kx)
            for (int ky = 0; ky < g.k[1]; ++ky)
                for (int kz = 0; kz < g.k[2]; ++kz, ++r) {
                    T* row = col + r * cols;
                    const int dxk = kx - g.pad_lo[0], dy = ky - g.pad_lo[1],
                              dz = kz - g.pad_lo[2];
                    for (int xo = x0; xo < x1; ++xo) {
                        T* px = row + std::int64_t(xo - x0) * plane;
                        const int xi = xo + dxk;
                        if (xi < 0 || xi >= X) {
                            std::memset(px, 0, sizeof(T) * static_cast<std::size_t>(plane));
                            continue;
                        }
                        if (dy < 0)
                            std::memset(px, 0, sizeof(T) * static_cast<std::size_t>(-dy) * Z);
                        else if (dy > 0)
                            std::memset(px + (std::int64_t(Y) - dy) * Z, 0,
                                        sizeof(T) * static_cast<std::size_t>(dy) * Z);
                        if (dz != 0) {
                            const int ylo = std::max(0, -dy), yhi = Y - std::max(0, dy);
                            if (dz < 0)
                                for (int yo = ylo; yo < yhi; ++yo)
                                    for (int z = 0; z < -dz; ++z) px[std::int64_t(yo) * Z + z] = T(0);
                            else
                                for (int yo = ylo; yo < yhi; ++yo)
                                    for (int z = 0; z < dz; ++z)
                                        px[std::int64_t(yo) * Z + (Z - 1 - z)] = T(0);
                        }
                    }
                    const std::int64_t off =
                        (std::int64_t(x0) + dxk) * plane + std::int64_t(dy) * Z + dz;
                    const std::int64_t lo = std::max<std::int64_t>(0, -off);
                    const std::int64_t hi =
                        std::min<std::int64_t>(cols, std::int64_t(X) * plane - off);
                    T* base = xc + off;
                    for (std::int64_t v = lo; v < hi; ++v) base[v] += row[v];
                }
    }
}

// Fill the patch matrix for output columns xo in [x0, x1).
// col is (patch_rows x (x1-x0)*out[1]*out[2]), row-major.
template <typename T>
void im2col(const T* x, const ConvGeom& g, int x0, int x1, T* col) {
    if (unit_stride(g)) {
        im2col_unit(x, g, x0, x1, col);
        return;
    }
    const int Yo = g.out[1], Zo = g.out[2];
    const int Y = g.in[1], Z = g.in[2];
    const std::int64_t cols_per_x = std::int64_t(Yo) * Zo;
    const std::int64_t tile_cols = (x1 - x0) * cols_per_x;
    std::int64_t r = 0;
    for (int ci = 0; ci < g.ci; ++ci) {
        const T* xc = x + std::int64_t(ci) * g.in_voxels();
        for (int kx = 0; kx < g.k[0]; ++kx)
            for (int ky = 0; ky < g.k[1]; ++ky)
                for (int kz = 0; kz < g.k[2]; ++kz, ++r) {
                    T* dst_row = col + r * tile_cols;
                    const int zo_lo = std::max(0, ceil_div(g.pad_lo[2] - kz, g.stride[2]));
                    const int zo_hi = std::min(
                        Zo, floor_div(Z - 1 - kz + g.pad_lo[2], g.stride[2]) + 1);
                    for (int xo = x0; xo < x1; ++xo) {
                        const int xi = xo * g.stride[0] + kx - g.pad_lo[0];
                        T* dst_x = dst_row + (xo - x0) * cols_per_x;
                        if (xi < 0 || xi >= g.in[0]) {
                            std::memset(dst_x, 0, sizeof(T) * static_cast<std::size_t>(cols_per_x));
                            continue;
                        }
                        for (int yo = 0; yo < Yo; ++yo) {
                            const int yi = yo * g.stride[1] + ky - g.pad_lo[1];
                            T* dst = dst_x + std::int64_t(yo) * Zo;
                            if (yi < 0 || yi >= Y || zo_lo >= zo_hi) {
                                std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(Zo));
                                continue;
                            }
                            const T* src = xc + (std::int64_t(xi) * Y + yi) * Z;
                            if (zo_lo > 0)
                                std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(zo_lo));
                            if (g.stride[2] == 1) {
                                std::memcpy(dst + zo_lo, src + zo_lo + kz - g.pad_lo[2],
                                            sizeof(T) * static_cast<std::size_t>(zo_hi - zo_lo));
                            } else {
                                for (int zo = zo_lo; zo < zo_hi; ++zo)
                                    dst[zo] = src[zo * g.stride[2] + kz - g.pad_lo[2]];
                            }
                            if (zo_hi < Zo)
                                std::memset(dst + zo_hi, 0,
                                            sizeof(T) * static_cast<std::size_t>(Zo - zo_hi));
                        }
                    }
                }
    }
}

// Scatter-add the patch matrix back into dx (the transpose of im2col).
// The unit-stride path may clobber wrapped entries of `col`.
template <typename T>
void col2im_add(T* col, const ConvGeom& g, int x0, int x1, T* dx) {
    if (unit_stride(g)) {
        col2im_unit_add(col, g, x0, x1, dx);
        return;
    }
    const int Yo = g.out[1], Zo = g.out[2];
    const int Y = g.in[1], Z = g.in[2];
    const std::int64_t cols_per_x = std::int64_t(Yo) * Zo;
    const std::int64_t tile_cols = (x1 - x0) * cols_per_x;
    std::int64_t r = 0;
    for (int ci = 0; ci < g.ci; ++ci) {
        T* xc = dx + std::int64_t(ci) * g.in_voxels();
        for (int kx = 0; kx < g.k[0]; ++kx)
            for (int ky = 0; ky < g.k[1]; ++ky)
                for (int kz = 0; kz < g.k[2]; ++kz, ++r) {
                    const T* src_row = col + r * tile_cols;
                    const int zo_lo = std::max(0, ceil_div(g.pad_lo[2] - kz, g.stride[2]));
                    const int zo_hi = std::min(
                        Zo, floor_div(Z - 1 - kz + g.pad_lo[2], g.stride[2]) + 1);
                    for (int xo = x0; xo < x1; ++xo) {
                        const int xi = xo * g.stride[0] + kx - g.pad_lo[0];
                        if (xi < 0 || xi >= g.in[0]) continue;
                        const T* src_x = src_row + (xo - x0) * cols_per_x;
                        for (int yo = 0; yo < Yo; ++yo) {
                            const int yi = yo * g.stride[1] + ky - g.pad_lo[1];
                            if (yi < 0 || yi >= Y) continue;
                            const T* src = src_x + std::int64_t(yo) * Zo;
                            T* dst = xc + (std::int64_t(xi) * Y + yi) * Z;
                            for (int zo = zo_lo; zo < zo_hi; ++zo)
                                dst[zo * g.stride[2] + kz - g.pad_lo[2]] += src[zo];
                        }
                    }
                }
    }
}

inline int conv_tile_x(const ConvGeom& g, std::size_t elem_size) {
    const std::int64_t budget = 2ll << 20;  // patch-buffer bytes per tile
    const std::int64_t per_x =
        std::int64_t(g.patch_rows()) * g.out[1] * g.out[2] * static_cast<std::int64_t>(elem_size);
    return static_cast<int>(std::max<std::int64_t>(1, budget / std::max<std::int64_t>(per_x, 1)));
}

template <typename T>
bool is_pointwise(const ConvGeom& g) {
    return g.k == std::array<int, 3>{1, 1, 1} && g.stride == std::array<int, 3>{1, 1, 1};
}

}  // namespace detail

/// y (co, out) = w (co, ci*k^3) * patches(x) + b. Weights are stored
/// (co, ci, k0, k1, k2), which is already the GEMM layout.
template <typename T>
void conv3d_forward(const T* x, const T* w, const T* b, const ConvGeom& g, T* y) {
    const std::int64_t vo = g.out_voxels();
    if (detail::is_pointwise<T>(g)) {
        EStrideMap<T> ym(y, g.co, vo, Eigen::OuterStride<>(vo));
        ECMap<T> wm(w, g.co, g.ci);
        ECMap<T> xm(x, g.ci, vo);
        ym.noalias() = wm * xm;
    } else {
        const int rows = g.patch_rows();
        const int tile = detail::conv_tile_x(g, sizeof(T));
        Tensor<T> col({rows, tile * g.out[1] * g.out[2]});
        ECMap<T> wm(w, g.co, rows);
        for (int x0 = 0; x0 < g.out[0]; x0 += tile) {
            const int x1 = std::min(g.out[0], x0 + tile);
            const std::int64_t cols = std::int64_t(x1 - x0) * g.out[1] * g.out[2];
            detail::im2col(x, g, x0, x1, col.data());
            ECMap<T> cm(col.data(), rows, cols);
            EStrideMap<T> ym(y + std::int64_t(x0) * g.out[1] * g.out[2], g.co, cols,
                             Eigen::OuterStride<>(vo));
            ym.noalias() = wm * cm;
        }
    }
    if (b) {
        for (int c = 0; c < g.co; ++c) {
            T* yc = y + std::int64_t(c) * vo;
            const T bias = b[c];
            for (std::int64_t i = 0; i < vo; ++i) yc[i] += bias;
        }
    }
}

/// Accumulates dw/db always; accumulates dx when non-null.
template <typename T>
void conv3d_backward(const T* x, const T* w, const ConvGeom& g, const T* gy, T* dx, T* dw, T* db) {
    const std::int64_t vo = g.out_voxels();
    if (db) {
        for (int c = 0; c < g.co; ++c) {
            const T* gc = gy + std::int64_t(c) * vo;
            T s = 0;
            for (std::int64_t i = 0; i < vo; ++i) s += gc[i];
            db[c] += s;
        }
    }
    if (detail::is_pointwise<T>(g)) {
        ECStrideMap<T> gym(gy, g.co, vo, Eigen::OuterStride<>(vo));
        ECMap<T> xm(x, g.ci, vo);
        if (dw) {
            EMap<T> dwm(dw, g.co, g.ci);
            dwm.noalias() += gym * xm.transpose();
        }
        if (dx) {
            ECMap<T> wm(w, g.co, g.ci);
            EMap<T> dxm(dx, g.ci, vo);
            dxm.noalias() += wm.transpose() * gym;
        }
        return;
    }
    const int rows = g.patch_rows();
    const int tile = detail::conv_tile_x(g, sizeof(T));
    Tensor<T> col({rows, tile * g.out[1] * g.out[2]});
    Tensor<T> dcol;
    if (dx) dcol = Tensor<T>({rows, tile * g.out[1] * g.out[2]});
    for (int x0 = 0; x0 < g.out[0]; x0 += tile) {
        const int x1 = std::min(g.out[0], x0 + tile);
        const std::int64_t cols = std::int64_t(x1 - x0) * g.out[1] * g.out[2];
        ECStrideMap<T> gym(gy + std::int64_t(x0) * g.out[1] * g.out[2], g.co, cols,
                           Eigen::OuterStride<>(vo));
        if (dw) {
            detail::im2col(x, g, x0, x1, col.data());
            ECMap<T> cm(col.data(), rows, cols);
            EMap<T> dwm(dw, g.co, rows);
            dwm.noalias() += gym * cm.transpose();
        }
        if (dx) {
            ECMap<T> wm(w, g.co, rows);
            EMap<T> dcm(dcol.data(), rows, cols);
            dcm.noalias() = wm.transpose() * gym;
            detail::col2im_add(dcol.data(), g, x0, x1, dx);
        }
    }
}

// ---------------------------------------------------------------------------
// Group normalization over (C, spatial); statistics per group of channels
// ---------------------------------------------------------------------------

/// Largest of {8,4,2,1} dividing the channel count. Keeps per-group statistics
/// meaningful across the channel widths used in this project.
inline int norm_groups_for(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

template <typename T>
void group_norm_forward(const T* x, const T* gamma, const T* beta, int channels,
                        std::int64_t spatial, int groups, double eps, T* y, double* mean_out,
                        double* istd_out) {
    if (channels % groups != 0)
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int cg = channels / groups;
    const std::int64_t n = std::int64_t(cg) * spatial;
    for (int gi = 0; gi < groups; ++gi) {
        const T* xg = x + std::int64_t(gi) * n;
        double sum = 0, sq = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(xg[i]);
            sum += v;
            sq += v * v;
        }
        const double mu = sum / static_cast<double>(n);
        const double var = std::max(0.0, sq / static_cast<double>(n) - mu * mu);
        const double istd = 1.0 / std::sqrt(var + eps);
        mean_out[gi] = mu;
        istd_out[gi] = istd;
        T* yg = y + std::int64_t(gi) * n;
        for (int c = 0; c < cg; ++c) {
            const double ga = static_cast<double>(gamma[gi * cg + c]);
            const double be = static_cast<double>(beta[gi * cg + c]);
            const T* xc = xg + std::int64_t(c) * spatial;
            T* yc = yg + std::int64_t(c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i)
                yc[i] = static_cast<T>((static_cast<double>(xc[i]) - mu) * istd * ga + be);
        }
    }
}

template <typename T>
void group_norm_backward(const T* x, const T* gamma, int channels, std::int64_t spatial,
                         int groups, const double* mean, const double* istd, const T* gy, T* dx,
                         T* dgamma, T* dbeta) {
    const int cg = channels / groups;
    const std::int64_t n = std::int64_t(cg) * spatial;
    for (int gi = 0; gi < groups; ++gi) {
        const T* xg = x + std::int64_t(gi) * n;
        const T* gyg = gy + std::int64_t(gi) * n;
        const double mu = mean[gi], is = istd[gi];
        double s1 = 0, s2 = 0;  // sums of dxhat and dxhat*xhat
        for (int c = 0; c < cg; ++c) {
            const double ga = static_cast<double>(gamma[gi * cg + c]);
            const T* xc = xg + std::int64_t(c) * spatial;
            const T* gc = gyg + std::int64_t(c) * spatial;
            double dg = 0, db = 0;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double xhat = (static_cast<double>(xc[i]) - mu) * is;
                const double gyv = static_cast<double>(gc[i]);
                dg += gyv * xhat;
                db += gyv;
                const double dxhat = gyv * ga;
                s1 += dxhat;
                s2 += dxhat * xhat;
            }
            if (dgamma) dgamma[gi * cg + c] += static_cast<T>(dg);
            if (dbeta) dbeta[gi * cg + c] += static_cast<T>(db);
        }
        if (!dx) continue;
        const double inv_n = 1.0 / static_cast<double>(n);
        T* dxg = dx + std::int64_t(gi) * n;
        for (int c = 0; c < cg; ++c) {
            const double ga = static_cast<double>(gamma[gi * cg + c]);
            const T* xc = xg + std::int64_t(c) * spatial;
            const T* gc = gyg + std::int64_t(c) * spatial;
            T* dc = dxg + std::int64_t(c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double xhat = (static_cast<double>(xc[i]) - mu) * is;
                const double dxhat = static_cast<double>(gc[i]) * ga;
                dc[i] += static_cast<T>(is * (dxhat - s1 * inv_n - xhat * s2 * inv_n));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trilinear resampling plans (ego-motion warp and FPN upsampling)
// ---------------------------------------------------------------------------

/// Precomputed 8-tap gather: out[v] = sum_t w[v,t] * src[idx[v,t]].
/// idx < 0 marks a tap outside the source grid (contributes zero).
struct SamplePlan {
    std::array<int, 3> out_dims{};
    std::int64_t in_voxels = 0;
    std::vector<std::int32_t> idx;  // 8 per output voxel
    std::vector<double> w;

    std::int64_t out_voxels() const {
        return std::int64_t(out_dims[0]) * out_dims[1] * out_dims[2];
    }
};

namespace detail {

inline void plan_push(SamplePlan& plan, const std::array<double, 3>& u,
                      const std::array<int, 3>& dims, bool clamp) {
    std::array<double, 3> uu = u;
    // Snap near-integer coordinates so exact voxel shifts stay exact.
    for (int a = 0; a < 3; ++a) {
        const double r = std::round(uu[a]);
        if (std::abs(uu[a] - r) < 1e-9) uu[a] = r;
        if (clamp) uu[a] = std::min(std::max(uu[a], 0.0), static_cast<double>(dims[a] - 1));
    }
    std::array<int, 3> i0;
    std::array<double, 3> f;
    for (int a = 0; a < 3; ++a) {
        i0[a] = static_cast<int>(std::floor(uu[a]));
        f[a] = uu[a] - i0[a];
    }
    for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
                const int xi = i0[0] + dx, yi = i0[1] + dy, zi = i0[2] + dz;
                const double wgt = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) *
                                   (dz ? f[2] : 1 - f[2]);
                const bool in = xi >= 0 && xi < dims[0] && yi >= 0 && yi < dims[1] && zi >= 0 &&
                                zi < dims[2];
                if (in && wgt != 0.0) {
                    plan.idx.push_back(
                        static_cast<std::int32_t>((std::int64_t(xi) * dims[1] + yi) * dims[2] + zi));
                    plan.w.push_back(wgt);
                } else {
                    plan.idx.push_back(-1);
                    plan.w.push_back(0.0);
                }
            }
}

}  // namespace detail

/// Plan that samples the source grid (frame `src`) at the current frame's
/// voxel centers. Both grids share `spec`; out-of-grid taps are zero.
inline SamplePlan make_warp_plan(const GridSpec& spec, const EgoPose& pose_src,
                                 const EgoPose& pose_cur) {
    SamplePlan plan;
    plan.out_dims = spec.dims;
    plan.in_voxels = spec.num_voxels();
    plan.idx.reserve(static_cast<std::size_t>(plan.out_voxels()) * 8);
    plan.w.reserve(static_cast<std::size_t>(plan.out_voxels()) * 8);
    const EgoPose cur_to_src = compose_pose(invert_pose(pose_src), pose_cur);
    for (int i = 0; i < spec.dims[0]; ++i)
        for (int j = 0; j < spec.dims[1]; ++j)
            for (int k = 0; k < spec.dims[2]; ++k) {
                const Vec3 c = voxel_center(spec, i, j, k);
                const Vec3 s = cur_to_src.apply(c);
                std::array<double, 3> u;
                for (int a = 0; a < 3; ++a)
                    u[static_cast<std::size_t>(a)] =
                        (s[static_cast<std::size_t>(a)] - spec.range_min(a)) /
                            spec.voxel_size[static_cast<std::size_t>(a)] -
                        0.5;
                detail::plan_push(plan, u, spec.dims, /*clamp=*/false);
            }
    return plan;
}

/// Trilinear upsampling plan (half-pixel-center mapping, clamped at borders,
/// so constant fields stay constant).
inline SamplePlan make_upsample_plan(const std::array<int, 3>& in_dims,
                                     const std::array<int, 3>& out_dims) {
    SamplePlan plan;
    plan.out_dims = out_dims;
    plan.in_voxels = std::int64_t(in_dims[0]) * in_dims[1] * in_dims[2];
    plan.idx.reserve(static_cast<std::size_t>(plan.out_voxels()) * 8);
    plan.w.reserve(static_cast<std::size_t>(plan.out_voxels()) * 8);
    std::array<double, 3> ratio;
    for (int a = 0; a < 3; ++a)
        ratio[static_cast<std::size_t>(a)] = static_cast<double>(in_dims[static_cast<std::size_t>(a)]) /
                                             static_cast<double>(out_dims[static_cast<std::size_t>(a)]);
    for (int i = 0; i < out_dims[0]; ++i)
        for (int j = 0; j < out_dims[1]; ++j)
            for (int k = 0; k < out_dims[2]; ++k) {
                const std::array<double, 3> u = {(i + 0.5) * ratio[0] - 0.5,
                                                 (j + 0.5) * ratio[1] - 0.5,
                                                 (k + 0.5) * ratio[2] - 0.5};
                detail::plan_push(plan, u, in_dims, /*clamp=*/true);
            }
    return plan;
}

template <typename T>
void sample_forward(const T* x, int channels, const SamplePlan& plan, T* y) {
    const std::int64_t vo = plan.out_voxels();
    const std::int64_t vi = plan.in_voxels;
    for (int c = 0; c < channels; ++c) {
        const T* xc = x + std::int64_t(c) * vi;
        T* yc = y + std::int64_t(c) * vo;
        for (std::int64_t v = 0; v < vo; ++v) {
            double acc = 0;
            const std::int32_t* id = plan.idx.data() + v * 8;
            const double* w = plan.w.data() + v * 8;
            for (int t = 0; t < 8; ++t)
                if (id[t] >= 0) acc += w[t] * static_cast<double>(xc[id[t]]);
            yc[v] = static_cast<T>(acc);
        }
    }
}

template <typename T>
void sample_backward(const SamplePlan& plan, int channels, const T* gy, T* dx) {
    const std::int64_t vo = plan.out_voxels();
    const std::int64_t vi = plan.in_voxels;
    for (int c = 0; c < channels; ++c) {
        T* dc = dx + std::int64_t(c) * vi;
        const T* gc = gy + std::int64_t(c) * vo;
        for (std::int64_t v = 0; v < vo; ++v) {
            const std::int32_t* id = plan.idx.data() + v * 8;
            const double* w = plan.w.data() + v * 8;
            for (int t = 0; t < 8; ++t)
                if (id[t] >= 0) dc[id[t]] += static_cast<T>(w[t] * static_cast<double>(gc[v]));
        }
    }
}

// ---------------------------------------------------------------------------
// Depth-weighted splat of image features into the voxel grid
// ---------------------------------------------------------------------------

/// Maps every (feature pixel, depth bin) to the linear index of the voxel its
/// unprojected 3D point falls into, or -1 when outside the grid.
struct LiftPlan {
    int feat_h = 0, feat_w = 0, depth_bins = 0;
    std::int64_t num_voxels = 0;
    std::vector<std::int32_t> voxel_of;  // (depth_bins, feat_h, feat_w)
};

template <typename T>
void lift_splat_forward(const T* feat, const T* probs, int channels, const LiftPlan& plan, T* y) {
    const std::int64_t pixels = std::int64_t(plan.feat_h) * plan.feat_w;
    const std::int64_t vg = plan.num_voxels;
    std::memset(y, 0, sizeof(T) * static_cast<std::size_t>(channels * vg));
    for (std::int64_t p = 0; p < pixels; ++p) {
        for (int d = 0; d < plan.depth_bins; ++d) {
            const std::int32_t v = plan.voxel_of[static_cast<std::size_t>(d * pixels + p)];
            if (v < 0) continue;
            const T w = probs[d * pixels + p];
            for (int c = 0; c < channels; ++c) y[std::int64_t(c) * vg + v] += w * feat[c * pixels + p];
        }
    }
}

template <typename T>
void lift_splat_backward(const T* feat, const T* probs, int channels, const LiftPlan& plan,
                         const T* gy, T* dfeat, T* dprobs) {
    const std::int64_t pixels = std::int64_t(plan.feat_h) * plan.feat_w;
    const std::int64_t vg = plan.num_voxels;
    for (std::int64_t p = 0; p < pixels; ++p) {
        for (int d = 0; d < plan.depth_bins; ++d) {
            const std::int32_t v = plan.voxel_of[static_cast<std::size_t>(d * pixels + p)];
            if (v < 0) continue;
            const T w = probs[d * pixels + p];
            T dp = 0;
            for (int c = 0; c < channels; ++c) {
                const T g = gy[std::int64_t(c) * vg + v];
                if (dfeat) dfeat[c * pixels + p] += w * g;
                dp += feat[c * pixels + p] * g;
            }
            if (dprobs) dprobs[d * pixels + p] += dp;
        }
    }
}

// ---------------------------------------------------------------------------
// Channel softmax / cross-entropy
// ---------------------------------------------------------------------------

template <typename T>
void softmax_channels_forward(const T* x, int channels, std::int64_t spatial, T* y) {
    for (std::int64_t p = 0; p < spatial; ++p) {
        double m = -1e300;
        for (int c = 0; c < channels; ++c)
            m = std::max(m, static_cast<double>(x[std::int64_t(c) * spatial + p]));
        double s = 0;
        for (int c = 0; c < channels; ++c) {
            const double e = std::exp(static_cast<double>(x[std::int64_t(c) * spatial + p]) - m);
            y[std::int64_t(c) * spatial + p] = static_cast<T>(e);
            s += e;
        }
        const double inv = 1.0 / s;
        for (int c = 0; c < channels; ++c)
            y[std::int64_t(c) * spatial + p] = static_cast<T>(
                static_cast<double>(y[std::int64_t(c) * spatial + p]) * inv);
    }
}

template <typename T>
void softmax_channels_backward(const T* y, int channels, std::int64_t spatial, const T* gy,
                               T* dx) {
    for (std::int64_t p = 0; p < spatial; ++p) {
        double dot = 0;
        for (int c = 0; c < channels; ++c)
            dot += static_cast<double>(y[std::int64_t(c) * spatial + p]) *
                   static_cast<double>(gy[std::int64_t(c) * spatial + p]);
        for (int c = 0; c < channels; ++c) {
            const std::int64_t i = std::int64_t(c) * spatial + p;
            dx[i] += static_cast<T>(static_cast<double>(y[i]) *
                                    (static_cast<double>(gy[i]) - dot));
        }
    }
}

}  // namespace nn
}  // namespace teocc
