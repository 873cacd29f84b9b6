#pragma once

// Value-level numerical kernels. Nothing here records a graph; the differentiable
// operators in ops.hpp are thin wrappers that pair these with their adjoints.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "dsa/core/tensor.hpp"

namespace dsa::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op)
{
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const int da = i + a.size() >= r ? a[i + a.size() - r] : 1;
        const int db = i + b.size() >= r ? b[i + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b)
                             + " are not broadcast-compatible");
        out[i] = da == 1 ? db : da;
    }
    return out;
}

/// Row-major strides of `s` laid into the right-aligned 4-slot frame of `frame`,
/// with stride 0 on broadcast (size-1) dimensions.
inline std::array<std::size_t, kMaxRank> broadcast_strides(const Shape& s, const std::array<int, kMaxRank>& frame)
{
    const auto p = pad4(s);
    std::array<std::size_t, kMaxRank> st{};
    std::size_t acc = 1;
    for (int i = kMaxRank - 1; i >= 0; --i) {
        st[i] = (p[i] == 1 && frame[i] != 1) ? 0 : acc;
        acc *= static_cast<std::size_t>(p[i]);
    }
    return st;
}

template <typename T, typename F>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, const char* op)
{
    if (a.shape() == b.shape()) {
        Tensor<T> out(a.shape());
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        const std::size_t n = out.size();
        for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const Shape os = broadcast_shape(a.shape(), b.shape(), op);
    Tensor<T> out(os);
    const auto f4 = pad4(os);
    const auto sa = broadcast_strides(a.shape(), f4);
    const auto sb = broadcast_strides(b.shape(), f4);
    T* po = out.data();
    const T* pa = a.data();
    const T* pb = b.data();
    std::size_t o = 0;
    for (int i0 = 0; i0 < f4[0]; ++i0)
        for (int i1 = 0; i1 < f4[1]; ++i1)
            for (int i2 = 0; i2 < f4[2]; ++i2) {
                const std::size_t ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                const std::size_t bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for (int i3 = 0; i3 < f4[3]; ++i3) po[o++] = f(pa[ba + i3 * sa[3]], pb[bb + i3 * sb[3]]);
            }
    return out;
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& a, F f)
{
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
    return out;
}

inline bool broadcastable_to(const Shape& from, const Shape& to)
{
    if (from.size() > to.size()) return false;
    const std::size_t off = to.size() - from.size();
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from[i] != 1 && from[i] != to[i + off]) return false;
    return true;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& target)
{
    if (x.shape() == target) return x;
    if (!broadcastable_to(x.shape(), target))
        throw ShapeError("broadcast_to: " + to_string(x.shape()) + " -> " + to_string(target));
    Tensor<T> out(target);
    const auto f4 = pad4(target);
    const auto sx = broadcast_strides(x.shape(), f4);
    T* po = out.data();
    const T* px = x.data();
    std::size_t o = 0;
    for (int i0 = 0; i0 < f4[0]; ++i0)
        for (int i1 = 0; i1 < f4[1]; ++i1)
            for (int i2 = 0; i2 < f4[2]; ++i2) {
                const std::size_t b = i0 * sx[0] + i1 * sx[1] + i2 * sx[2];
                for (int i3 = 0; i3 < f4[3]; ++i3) po[o++] = px[b + i3 * sx[3]];
            }
    return out;
}

/// Sums `x` down to `target`, the adjoint of broadcast_to.
template <typename T>
Tensor<T> sum_to(const Tensor<T>& x, const Shape& target)
{
    if (x.shape() == target) return x;
    if (!broadcastable_to(target, x.shape()))
        throw ShapeError("sum_to: " + to_string(x.shape()) + " -> " + to_string(target));
    Tensor<T> out(target);
    const auto f4 = pad4(x.shape());
    const auto so = broadcast_strides(target, f4);
    T* po = out.data();
    const T* px = x.data();
    std::size_t i = 0;
    for (int i0 = 0; i0 < f4[0]; ++i0)
        for (int i1 = 0; i1 < f4[1]; ++i1)
            for (int i2 = 0; i2 < f4[2]; ++i2) {
                const std::size_t b = i0 * so[0] + i1 * so[1] + i2 * so[2];
                if (so[3] == 0) {
                    T acc = 0;
                    for (int i3 = 0; i3 < f4[3]; ++i3) acc += px[i++];
                    po[b] += acc;
                } else {
                    for (int i3 = 0; i3 < f4[3]; ++i3) po[b + i3 * so[3]] += px[i++];
                }
            }
    return out;
}

template <typename T>
T sum_all(const Tensor<T>& x)
{
    T acc = 0;
    for (T v : x.vec()) acc += v;
    return acc;
}

// ---------------------------------------------------------------- GEMM

/// out(m,n) = op(a) * op(b), where op transposes when the flag is set. Rank-2 only.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb)
{
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: rank-2 operands required, got " + to_string(a.shape()) + " and "
                         + to_string(b.shape()));
    const int m = ta ? a.dim(1) : a.dim(0);
    const int ka = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + (ta ? "^T" : "") + " x "
                         + to_string(b.shape()) + (tb ? "^T" : ""));
    Tensor<T> out(Shape{m, n});
    CMapMat<T> A(a.data(), a.dim(0), a.dim(1));
    CMapMat<T> B(b.data(), b.dim(0), b.dim(1));
    MapMat<T> C(out.data(), m, n);
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
    return out;
}

// ---------------------------------------------------------------- convolution

struct ConvGeom {
    int n, c, h, w;   // input
    int o, k;         // filters, square kernel size
    int stride, pad;
    int ho, wo;       // output

    static ConvGeom make(const Shape& x, const Shape& wt, int stride, int pad, const char* op)
    {
        if (x.size() != 4 || wt.size() != 4)
            throw ShapeError(std::string(op) + ": expected NCHW input and OIKK weight, got " + to_string(x) + " and "
                             + to_string(wt));
        if (wt[2] != wt[3]) throw ShapeError(std::string(op) + ": non-square kernel " + to_string(wt));
        if (x[1] != wt[1])
            throw ShapeError(std::string(op) + ": input channels " + std::to_string(x[1]) + " != weight channels "
                             + std::to_string(wt[1]) + " (input " + to_string(x) + ", weight " + to_string(wt) + ")");
        if (stride < 1 || pad < 0) throw ShapeError(std::string(op) + ": invalid stride/padding");
        ConvGeom g{x[0], x[1], x[2], x[3], wt[0], wt[2], stride, pad, 0, 0};
        const int hn = x[2] + 2 * pad - wt[2];
        const int wn = x[3] + 2 * pad - wt[3];
        if (hn < 0 || wn < 0)
            throw ShapeError(std::string(op) + ": non-positive output size for input " + to_string(x) + ", kernel "
                             + to_string(wt) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
        g.ho = hn / stride + 1;
        g.wo = wn / stride + 1;
        return g;
    }

    int ckk() const { return c * k * k; }
    int hw_out() const { return ho * wo; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col)
{
    const int hw = g.hw_out();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * hw;
                const T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* img)
{
    const int hw = g.hw_out();
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * hw;
                T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    const T* src = row + oy * g.wo;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

/// Cross-correlation (no kernel flip).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad)
{
    const ConvGeom g = ConvGeom::make(x.shape(), w.shape(), stride, pad, "conv2d");
    Tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
    std::vector<T> col(static_cast<std::size_t>(g.ckk()) * g.hw_out());
    CMapMat<T> W(w.data(), g.o, g.ckk());
    for (int n = 0; n < g.n; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * g.c * g.h * g.w, g, col.data());
        CMapMat<T> C(col.data(), g.ckk(), g.hw_out());
        MapMat<T> O(out.data() + static_cast<std::size_t>(n) * g.o * g.hw_out(), g.o, g.hw_out());
        O.noalias() = W * C;
    }
    return out;
}

/// Adjoint of conv2d w.r.t. its input: maps an output-shaped tensor back onto the input grid.
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape, int stride, int pad)
{
    const ConvGeom g = ConvGeom::make(x_shape, w.shape(), stride, pad, "conv2d_input_grad");
    if (gy.shape() != Shape{g.n, g.o, g.ho, g.wo})
        throw ShapeError("conv2d_input_grad: gradient shape " + to_string(gy.shape()) + " does not match output "
                         + to_string(Shape{g.n, g.o, g.ho, g.wo}));
    Tensor<T> dx(x_shape);
    std::vector<T> col(static_cast<std::size_t>(g.ckk()) * g.hw_out());
    MapMat<T> C(col.data(), g.ckk(), g.hw_out());
    CMapMat<T> W(w.data(), g.o, g.ckk());
    for (int n = 0; n < g.n; ++n) {
        CMapMat<T> G(gy.data() + static_cast<std::size_t>(n) * g.o * g.hw_out(), g.o, g.hw_out());
        C.noalias() = W.transpose() * G;
        col2im_add(col.data(), g, dx.data() + static_cast<std::size_t>(n) * g.c * g.h * g.w);
    }
    return dx;
}

/// Adjoint of conv2d w.r.t. its weight.
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const Shape& w_shape, int stride, int pad)
{
    const ConvGeom g = ConvGeom::make(x.shape(), w_shape, stride, pad, "conv2d_weight_grad");
    if (gy.shape() != Shape{g.n, g.o, g.ho, g.wo})
        throw ShapeError("conv2d_weight_grad: gradient shape " + to_string(gy.shape()) + " does not match output "
                         + to_string(Shape{g.n, g.o, g.ho, g.wo}));
    Tensor<T> dw(w_shape);
    MapMat<T> DW(dw.data(), g.o, g.ckk());
    std::vector<T> col(static_cast<std::size_t>(g.ckk()) * g.hw_out());
    CMapMat<T> C(col.data(), g.ckk(), g.hw_out());
    for (int n = 0; n < g.n; ++n) {
        im2col(x.data() + static_cast<std::size_t>(n) * g.c * g.h * g.w, g, col.data());
        CMapMat<T> G(gy.data() + static_cast<std::size_t>(n) * g.o * g.hw_out(), g.o, g.hw_out());
        DW.noalias() += G * C.transpose();
    }
    return dw;
}

// ---------------------------------------------------------------- pooling

struct PoolGeom {
    int n, c, h, w, k, stride, ho, wo;

    static PoolGeom make(const Shape& x, int k, int stride, const char* op)
    {
        if (x.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + to_string(x));
        if (x[2] < k || x[3] < k)
            throw ShapeError(std::string(op) + ": window " + std::to_string(k) + " larger than input " + to_string(x));
        return {x[0], x[1], x[2], x[3], k, stride, (x[2] - k) / stride + 1, (x[3] - k) / stride + 1};
    }
};

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride)
{
    const PoolGeom g = PoolGeom::make(x.shape(), k, stride, "avgpool2d");
    Tensor<T> out(Shape{g.n, g.c, g.ho, g.wo});
    const T inv = T(1) / static_cast<T>(k * k);
    T* po = out.data();
    for (int p = 0; p < g.n * g.c; ++p) {
        const T* plane = x.data() + static_cast<std::size_t>(p) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                T acc = 0;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) acc += plane[(oy * stride + ky) * g.w + ox * stride + kx];
                *po++ = acc * inv;
            }
    }
    return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& gy, const Shape& x_shape, int k, int stride)
{
    const PoolGeom g = PoolGeom::make(x_shape, k, stride, "avgpool2d_backward");
    if (gy.shape() != Shape{g.n, g.c, g.ho, g.wo})
        throw ShapeError("avgpool2d_backward: gradient shape " + to_string(gy.shape()));
    Tensor<T> dx(x_shape);
    const T inv = T(1) / static_cast<T>(k * k);
    const T* pg = gy.data();
    for (int p = 0; p < g.n * g.c; ++p) {
        T* plane = dx.data() + static_cast<std::size_t>(p) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                const T v = *pg++ * inv;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) plane[(oy * stride + ky) * g.w + ox * stride + kx] += v;
            }
    }
    return dx;
}

/// Max pooling; `argmax` receives, per output element, the flat input index of the winner.
/// Ties go to the first element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, std::vector<std::uint32_t>& argmax)
{
    const PoolGeom g = PoolGeom::make(x.shape(), k, stride, "maxpool2d");
    Tensor<T> out(Shape{g.n, g.c, g.ho, g.wo});
    argmax.resize(out.size());
    std::size_t o = 0;
    for (int p = 0; p < g.n * g.c; ++p) {
        const std::size_t base = static_cast<std::size_t>(p) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy)
            for (int ox = 0; ox < g.wo; ++ox) {
                std::size_t best = base + static_cast<std::size_t>(oy * stride) * g.w + ox * stride;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const std::size_t idx = base + static_cast<std::size_t>(oy * stride + ky) * g.w + ox * stride + kx;
                        if (x[idx] > x[best]) best = idx;
                    }
                out[o] = x[best];
                argmax[o++] = static_cast<std::uint32_t>(best);
            }
    }
    return out;
}

template <typename T>
Tensor<T> scatter_add(const Tensor<T>& src, const std::vector<std::uint32_t>& index, const Shape& out_shape)
{
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < src.size(); ++i) out[index[i]] += src[i];
    return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& src, const std::vector<std::uint32_t>& index, const Shape& out_shape)
{
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[index[i]];
    return out;
}

// ---------------------------------------------------------------- spatial resampling

/// A fixed linear map between H×W planes: every output pixel is a weighted sum of at most
/// four source pixels. Out-of-extent sources carry weight zero (zero-padding border).
struct SpatialPlan {
    int h = 0, w = 0;
    std::vector<std::array<std::int32_t, 4>> index;  // -1 marks an unused tap
    std::vector<std::array<double, 4>> weight;

    std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
};

template <typename T>
Tensor<T> spatial_apply(const Tensor<T>& x, const SpatialPlan& plan)
{
    if (x.rank() != 4 || x.dim(2) != plan.h || x.dim(3) != plan.w)
        throw ShapeError("spatial_map: plan is " + std::to_string(plan.h) + "x" + std::to_string(plan.w)
                         + ", input " + to_string(x.shape()));
    Tensor<T> out(x.shape());
    const std::size_t hw = plan.pixels();
    const std::size_t planes = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x.data() + p * hw;
        T* dst = out.data() + p * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            T acc = 0;
            for (int t = 0; t < 4; ++t) {
                const auto j = plan.index[i][t];
                if (j >= 0) acc += static_cast<T>(plan.weight[i][t]) * src[j];
            }
            dst[i] = acc;
        }
    }
    return out;
}

template <typename T>
Tensor<T> spatial_apply_transpose(const Tensor<T>& g, const SpatialPlan& plan)
{
    if (g.rank() != 4 || g.dim(2) != plan.h || g.dim(3) != plan.w)
        throw ShapeError("spatial_map_transpose: plan/input mismatch " + to_string(g.shape()));
    Tensor<T> out(g.shape());
    const std::size_t hw = plan.pixels();
    const std::size_t planes = static_cast<std::size_t>(g.dim(0)) * g.dim(1);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * hw;
        T* dst = out.data() + p * hw;
        for (std::size_t i = 0; i < hw; ++i)
            for (int t = 0; t < 4; ++t) {
                const auto j = plan.index[i][t];
                if (j >= 0) dst[j] += static_cast<T>(plan.weight[i][t]) * src[i];
            }
    }
    return out;
}

// ---------------------------------------------------------------- softmax

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x)
{
    if (x.rank() != 2) throw ShapeError("softmax: expected N x C logits, got " + to_string(x.shape()));
    Tensor<T> out(x.shape());
    const int n = x.dim(0), c = x.dim(1);
    for (int i = 0; i < n; ++i) {
        const T* row = x.data() + static_cast<std::size_t>(i) * c;
        T* o = out.data() + static_cast<std::size_t>(i) * c;
        T mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T s = 0;
        for (int j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - mx));
        for (int j = 0; j < c; ++j) o[j] /= s;
    }
    return out;
}

} // namespace dsa::kernels
