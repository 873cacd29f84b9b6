#pragma once

// Differentiable operators. Each backward is written in terms of these same operators,
// so running it under grad mode yields a differentiable gradient (double backprop).
// Fused kernels (group_norm) fall back to that form when their backward is recorded. The only
// exception is the fused batch_norm training kernel, which is first-order.

#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "dsa/core/kernels.hpp"
#include "dsa/core/var.hpp"

namespace dsa {

template <typename T>
using Vars = std::vector<Var<T>>;

template <typename T>
Var<T> sum_to(const Var<T>& x, const Shape& target);
template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& target);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> neg(const Var<T>& a);

// ---------------------------------------------------------------- broadcasting pair

template <typename T>
Var<T> sum_to(const Var<T>& x, const Shape& target)
{
    if (x.shape() == target) return x;
    const Shape src = x.shape();
    return make_op<T>("sum_to", kernels::sum_to(x.value(), target), {x},
                      [src](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{broadcast_to(g, src)}; });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& target)
{
    if (x.shape() == target) return x;
    const Shape src = x.shape();
    return make_op<T>("broadcast_to", kernels::broadcast_to(x.value(), target), {x},
                      [src](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{sum_to(g, src)}; });
}

// ---------------------------------------------------------------- arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    return make_op<T>("add", kernels::binary(a.value(), b.value(), std::plus<T>{}, "add"), {a, b},
                      [sa = a.shape(), sb = b.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? sum_to(g, sa) : Var<T>{}, nd[1] ? sum_to(g, sb) : Var<T>{}};
                      });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    return make_op<T>("sub", kernels::binary(a.value(), b.value(), std::minus<T>{}, "sub"), {a, b},
                      [sa = a.shape(), sb = b.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? sum_to(g, sa) : Var<T>{}, nd[1] ? sum_to(neg(g), sb) : Var<T>{}};
                      });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    return make_op<T>("mul", kernels::binary(a.value(), b.value(), std::multiplies<T>{}, "mul"), {a, b},
                      [a, b](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? sum_to(mul(g, b), a.shape()) : Var<T>{},
                                         nd[1] ? sum_to(mul(g, a), b.shape()) : Var<T>{}};
                      });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b)
{
    return make_op<T>("div", kernels::binary(a.value(), b.value(), std::divides<T>{}, "div"), {a, b},
                      [a, b](const Var<T>& self, const Var<T>& g, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? sum_to(div(g, b), a.shape()) : Var<T>{},
                                         nd[1] ? sum_to(neg(mul(g, div(self, b))), b.shape()) : Var<T>{}};
                      });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s)
{
    return make_op<T>("scale", kernels::unary(x.value(), [s](T v) { return v * s; }), {x},
                      [s](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{scale(g, s)}; });
}

/// x / d elementwise; exact when the quotient is representable (unlike scaling by 1/d).
template <typename T>
Var<T> div_scalar(const Var<T>& x, T d)
{
    return make_op<T>("div_scalar", kernels::unary(x.value(), [d](T v) { return v / d; }), {x},
                      [d](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{div_scalar(g, d)}; });
}

template <typename T>
Var<T> neg(const Var<T>& x)
{
    return scale(x, T(-1));
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s)
{
    return make_op<T>("add_scalar", kernels::unary(x.value(), [s](T v) { return v + s; }), {x},
                      [](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{g}; });
}

template <typename T>
Var<T> pow_scalar(const Var<T>& x, T p)
{
    return make_op<T>("pow", kernels::unary(x.value(), [p](T v) { return std::pow(v, p); }), {x},
                      [x, p](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{mul(g, scale(pow_scalar(x, p - T(1)), p))};
                      });
}

template <typename T>
Var<T> exp(const Var<T>& x)
{
    return make_op<T>("exp", kernels::unary(x.value(), [](T v) { return std::exp(v); }), {x},
                      [](const Var<T>& self, const Var<T>& g, const NeedsGrad&) { return Vars<T>{mul(g, self)}; });
}

template <typename T>
Var<T> log(const Var<T>& x)
{
    return make_op<T>("log", kernels::unary(x.value(), [](T v) { return std::log(v); }), {x},
                      [x](const Var<T>&, const Var<T>& g, const NeedsGrad&) { return Vars<T>{div(g, x)}; });
}

/// g where ref > threshold, slope * g elsewhere. The mask is piecewise constant in `ref`,
/// so only `g` receives a gradient.
template <typename T>
Var<T> mask_mul(const Var<T>& g, const Var<T>& ref, T threshold, T slope)
{
    const Tensor<T>& gv = g.value();
    const Tensor<T>& rv = ref.value();
    if (gv.shape() != rv.shape()) throw ShapeError("mask_mul: " + to_string(gv.shape()) + " vs " + to_string(rv.shape()));
    Tensor<T> out(gv.shape());
    const T* gp = gv.data();
    const T* rp = rv.data();
    T* op = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) op[i] = rp[i] > threshold ? gp[i] : slope * gp[i];
    return make_op<T>("mask_mul", std::move(out), {g},
                      [ref, threshold, slope](const Var<T>&, const Var<T>& gg, const NeedsGrad&) {
                          return Vars<T>{mask_mul(gg, ref, threshold, slope)};
                      });
}

template <typename T>
Var<T> relu(const Var<T>& x)
{
    return make_op<T>("relu", kernels::unary(x.value(), [](T v) { return v > T(0) ? v : T(0); }), {x},
                      [x](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{mask_mul(g, x, T(0), T(0))};
                      });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01))
{
    return make_op<T>("leaky_relu", kernels::unary(x.value(), [slope](T v) { return v > T(0) ? v : slope * v; }), {x},
                      [x, slope](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{mask_mul(g, x, T(0), slope)};
                      });
}

/// max(x, floor) elementwise; the gradient is zero where the floor is active (ties included).
template <typename T>
Var<T> clamp_min(const Var<T>& x, T floor)
{
    return make_op<T>("clamp_min", kernels::unary(x.value(), [floor](T v) { return v > floor ? v : floor; }), {x},
                      [x, floor](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{mask_mul(g, x, floor, T(0))};
                      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x)
{
    return make_op<T>("sigmoid", kernels::unary(x.value(), [](T v) { return T(1) / (T(1) + std::exp(-v)); }), {x},
                      [](const Var<T>& self, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{mul(g, mul(self, add_scalar(neg(self), T(1))))};
                      });
}

// ---------------------------------------------------------------- reductions & shape

template <typename T>
Var<T> sum(const Var<T>& x)
{
    return make_op<T>("sum", Tensor<T>::scalar(kernels::sum_all(x.value())), {x},
                      [src = x.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{broadcast_to(g, src)};
                      });
}

template <typename T>
Var<T> mean(const Var<T>& x)
{
    return div_scalar(sum(x), static_cast<T>(x.value().size()));
}

/// Sum over the listed axes, keeping them as size-1 dimensions.
template <typename T>
Var<T> sum_axes(const Var<T>& x, std::initializer_list<int> axes)
{
    Shape s = x.shape();
    for (int a : axes) s.at(static_cast<std::size_t>(a < 0 ? x.value().rank() + a : a)) = 1;
    return sum_to(x, s);
}

template <typename T>
Var<T> mean_axes(const Var<T>& x, std::initializer_list<int> axes)
{
    Var<T> s = sum_axes(x, axes);
    const T count = static_cast<T>(x.value().size() / s.value().size());
    return div_scalar(s, count);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s)
{
    if (x.shape() == s) return x;
    return make_op<T>("reshape", x.value().reshaped(std::move(s)), {x},
                      [src = x.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{reshape(g, src)};
                      });
}

template <typename T>
Var<T> flatten(const Var<T>& x)
{
    const int n = x.shape().at(0);
    return reshape(x, Shape{n, static_cast<int>(x.value().size() / std::max(n, 1))});
}

template <typename T>
Var<T> embed0(const Var<T>& x, int offset, int total);

/// Rows [begin, end) along axis 0.
template <typename T>
Var<T> slice0(const Var<T>& x, int begin, int end)
{
    const Shape& s = x.shape();
    if (s.empty() || begin < 0 || end > s[0] || begin > end)
        throw ShapeError("slice0: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + to_string(s));
    Shape os = s;
    os[0] = end - begin;
    const std::size_t inner = x.value().size() / std::max(s[0], 1);
    std::vector<T> data(x.value().data() + begin * inner, x.value().data() + end * inner);
    const int total = s[0];
    return make_op<T>("slice0", Tensor<T>(os, std::move(data)), {x},
                      [begin, total](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{embed0(g, begin, total)};
                      });
}

/// Places `x` at rows [offset, offset+n) of a zero tensor with `total` rows; adjoint of slice0.
template <typename T>
Var<T> embed0(const Var<T>& x, int offset, int total)
{
    Shape os = x.shape();
    const int rows = os.at(0);
    os[0] = total;
    Tensor<T> out(os);
    const std::size_t inner = x.value().size() / std::max(rows, 1);
    std::copy(x.value().vec().begin(), x.value().vec().end(), out.data() + offset * inner);
    return make_op<T>("embed0", std::move(out), {x}, [offset, rows](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
        return Vars<T>{slice0(g, offset, offset + rows)};
    });
}

template <typename T>
Var<T> concat0(const Vars<T>& parts)
{
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape os = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = os;
        a[0] = b[0] = 0;
        if (a != b) throw ShapeError("concat0: mismatched shapes " + to_string(p.shape()) + " vs " + to_string(os));
        total += p.shape()[0];
    }
    os[0] = total;
    std::vector<T> data;
    data.reserve(numel(os));
    std::vector<int> offsets, rows;
    int at = 0;
    for (const auto& p : parts) {
        offsets.push_back(at);
        rows.push_back(p.shape()[0]);
        at += p.shape()[0];
        data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
    }
    return make_op<T>("concat0", Tensor<T>(os, std::move(data)), parts,
                      [offsets, rows](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          Vars<T> out(rows.size());
                          for (std::size_t i = 0; i < rows.size(); ++i)
                              if (nd[i]) out[i] = slice0(g, offsets[i], offsets[i] + rows[i]);
                          return out;
                      });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false)
{
    return make_op<T>("matmul", kernels::matmul(a.value(), b.value(), ta, tb), {a, b},
                      [a, b, ta, tb](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          Var<T> da, db;
                          if (nd[0]) da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                          if (nd[1]) db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                          return Vars<T>{da, db};
                      });
}

/// y = x W^T + b, with W of shape (out, in).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b)
{
    if (x.value().rank() != 2 || w.value().rank() != 2 || x.shape()[1] != w.shape()[1])
        throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
    Var<T> y = matmul(x, w, false, true);
    return b.defined() ? add(y, b) : y;
}

// ---------------------------------------------------------------- convolution family

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, const Shape& x_shape, int stride, int pad);
template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, const Shape& w_shape, int stride, int pad);

/// 2-D cross-correlation of an NCHW input with an OIKK weight.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride = 1, int pad = 0)
{
    return make_op<T>("conv2d", kernels::conv2d(x.value(), w.value(), stride, pad), {x, w},
                      [x, w, stride, pad](const Var<T>&, const Var<T>& g, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? conv2d_input_grad(g, w, x.shape(), stride, pad) : Var<T>{},
                                         nd[1] ? conv2d_weight_grad(x, g, w.shape(), stride, pad) : Var<T>{}};
                      });
}

template <typename T>
Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, const Shape& x_shape, int stride, int pad)
{
    return make_op<T>("conv2d_input_grad", kernels::conv2d_input_grad(gy.value(), w.value(), x_shape, stride, pad),
                      {gy, w}, [gy, w, stride, pad](const Var<T>&, const Var<T>& u, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? conv2d(u, w, stride, pad) : Var<T>{},
                                         nd[1] ? conv2d_weight_grad(u, gy, w.shape(), stride, pad) : Var<T>{}};
                      });
}

template <typename T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, const Shape& w_shape, int stride, int pad)
{
    return make_op<T>("conv2d_weight_grad", kernels::conv2d_weight_grad(x.value(), gy.value(), w_shape, stride, pad),
                      {x, gy}, [x, gy, stride, pad](const Var<T>&, const Var<T>& u, const NeedsGrad& nd) {
                          return Vars<T>{nd[0] ? conv2d_input_grad(gy, u, x.shape(), stride, pad) : Var<T>{},
                                         nd[1] ? conv2d(x, u, stride, pad) : Var<T>{}};
                      });
}

// ---------------------------------------------------------------- pooling

template <typename T>
Var<T> avgpool2d_backward(const Var<T>& gy, const Shape& x_shape, int k, int stride);

template <typename T>
Var<T> avgpool2d(const Var<T>& x, int k = 2, int stride = 2)
{
    return make_op<T>("avgpool2d", kernels::avgpool2d(x.value(), k, stride), {x},
                      [src = x.shape(), k, stride](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{avgpool2d_backward(g, src, k, stride)};
                      });
}

template <typename T>
Var<T> avgpool2d_backward(const Var<T>& gy, const Shape& x_shape, int k, int stride)
{
    return make_op<T>("avgpool2d_backward", kernels::avgpool2d_backward(gy.value(), x_shape, k, stride), {gy},
                      [k, stride](const Var<T>&, const Var<T>& u, const NeedsGrad&) {
                          return Vars<T>{avgpool2d(u, k, stride)};
                      });
}

using IndexMap = std::shared_ptr<const std::vector<std::uint32_t>>;

template <typename T>
Var<T> index_gather(const Var<T>& src, IndexMap index, const Shape& out_shape);

/// out[index[i]] += src[i]
template <typename T>
Var<T> index_scatter(const Var<T>& src, IndexMap index, const Shape& out_shape)
{
    return make_op<T>("index_scatter", kernels::scatter_add(src.value(), *index, out_shape), {src},
                      [index, s = src.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{index_gather(g, index, s)};
                      });
}

/// out[i] = src[index[i]]
template <typename T>
Var<T> index_gather(const Var<T>& src, IndexMap index, const Shape& out_shape)
{
    return make_op<T>("index_gather", kernels::gather(src.value(), *index, out_shape), {src},
                      [index, s = src.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{index_scatter(g, index, s)};
                      });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, int k = 2, int stride = 2)
{
    auto idx = std::make_shared<std::vector<std::uint32_t>>();
    Tensor<T> out = kernels::maxpool2d(x.value(), k, stride, *idx);
    IndexMap index = idx;
    return make_op<T>("maxpool2d", std::move(out), {x}, [index, src = x.shape()](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
        return Vars<T>{index_scatter(g, index, src)};
    });
}

// ---------------------------------------------------------------- spatial resampling

using PlanPtr = std::shared_ptr<const kernels::SpatialPlan>;

template <typename T>
Var<T> spatial_map_transpose(const Var<T>& g, PlanPtr plan);

/// Applies a fixed per-plane linear resampling (bilinear warp, shift, mirror) to every channel.
template <typename T>
Var<T> spatial_map(const Var<T>& x, PlanPtr plan)
{
    return make_op<T>("spatial_map", kernels::spatial_apply(x.value(), *plan), {x},
                      [plan](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          return Vars<T>{spatial_map_transpose(g, plan)};
                      });
}

template <typename T>
Var<T> spatial_map_transpose(const Var<T>& g, PlanPtr plan)
{
    return make_op<T>("spatial_map_transpose", kernels::spatial_apply_transpose(g.value(), *plan), {g},
                      [plan](const Var<T>&, const Var<T>& u, const NeedsGrad&) {
                          return Vars<T>{spatial_map(u, plan)};
                      });
}

// ---------------------------------------------------------------- classification loss

template <typename T>
Var<T> softmax(const Var<T>& x)
{
    return make_op<T>("softmax", kernels::softmax_rows(x.value()), {x},
                      [](const Var<T>& self, const Var<T>& g, const NeedsGrad&) {
                          Var<T> gs = mul(g, self);
                          return Vars<T>{mul(self, sub(g, sum_axes(gs, {1})))};
                      });
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, int classes)
{
    Tensor<T> out(Shape{static_cast<int>(labels.size()), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) out[i * classes + labels[i]] = T(1);
    return out;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels)
{
    const Tensor<T>& z = logits.value();
    if (z.rank() != 2 || static_cast<std::size_t>(z.dim(0)) != labels.size())
        throw ShapeError("softmax_cross_entropy: logits " + to_string(z.shape()) + " vs " + std::to_string(labels.size())
                         + " labels");
    const int n = z.dim(0), c = z.dim(1);
    T loss = 0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
        const T* row = z.data() + static_cast<std::size_t>(i) * c;
        T mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T s = 0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        loss += (mx + std::log(s)) - row[y];
    }
    loss /= static_cast<T>(n);
    auto onehot = std::make_shared<Tensor<T>>(one_hot<T>(labels, c));
    return make_op<T>("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                      [logits, onehot, n](const Var<T>&, const Var<T>& g, const NeedsGrad&) {
                          Var<T> diff = sub(softmax(logits), Var<T>::constant(*onehot));
                          return Vars<T>{mul(diff, scale(g, T(1) / static_cast<T>(n)))};
                      });
}

// ---------------------------------------------------------------- normalization

namespace detail {

template <typename T>
struct GroupStats {
    int n, groups, cpg;
    std::size_t hw, per;
    std::vector<T> mean, rstd;
};

/// Per (sample, group) mean and 1/sqrt(var + eps), accumulated in double.
template <typename T>
GroupStats<T> group_stats(const Tensor<T>& x, int groups, T eps)
{
    GroupStats<T> st{x.dim(0), groups, x.dim(1) / groups, static_cast<std::size_t>(x.dim(2)) * x.dim(3), 0, {}, {}};
    st.per = st.hw * static_cast<std::size_t>(st.cpg);
    const std::size_t ng = static_cast<std::size_t>(st.n) * groups;
    st.mean.resize(ng);
    st.rstd.resize(ng);
    for (std::size_t k = 0; k < ng; ++k) {
        const T* p = x.data() + k * st.per;
        double s = 0;
        for (std::size_t j = 0; j < st.per; ++j) s += p[j];
        const double mu = s / static_cast<double>(st.per);
        double v = 0;
        for (std::size_t j = 0; j < st.per; ++j) v += (p[j] - mu) * (p[j] - mu);
        st.mean[k] = static_cast<T>(mu);
        st.rstd[k] = static_cast<T>(1.0 / std::sqrt(v / static_cast<double>(st.per) + static_cast<double>(eps)));
    }
    return st;
}

} // namespace detail

/// Group normalization over (C/G, H, W) per sample and group, followed by an optional
/// per-channel affine. groups == C gives instance norm; groups == 1 gives layer norm.
/// Fused kernels serve the forward pass and first-order backward; when the backward itself is
/// recorded it is expressed through differentiable operators instead.
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5))
{
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("group_norm: expected NCHW, got " + to_string(s));
    if (groups < 1 || s[1] % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(s[1]) + " channels not divisible into " + std::to_string(groups)
                         + " groups");
    const int c = s[1];
    if (c / groups * s[2] * s[3] < 1) throw ShapeError("group_norm: empty normalization group for " + to_string(s));
    if (gamma.defined() && gamma.value().size() != static_cast<std::size_t>(c))
        throw ShapeError("group_norm: scale of shape " + to_string(gamma.shape()) + " for " + std::to_string(c) + " channels");
    if (beta.defined() && beta.value().size() != static_cast<std::size_t>(c))
        throw ShapeError("group_norm: shift of shape " + to_string(beta.shape()) + " for " + std::to_string(c) + " channels");

    const Tensor<T>& xv = x.value();
    auto st = std::make_shared<detail::GroupStats<T>>(detail::group_stats(xv, groups, eps));
    Tensor<T> out(s);
    for (int i = 0; i < s[0]; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t k = static_cast<std::size_t>(i) * groups + ch / st->cpg;
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * st->hw;
            const T mu = st->mean[k], r = st->rstd[k];
            const T gm = gamma.defined() ? gamma.value()[ch] : T(1);
            const T bt = beta.defined() ? beta.value()[ch] : T(0);
            const T* p = xv.data() + base;
            T* o = out.data() + base;
            for (std::size_t j = 0; j < st->hw; ++j) o[j] = (p[j] - mu) * r * gm + bt;
        }

    Vars<T> inputs{x};
    if (gamma.defined()) inputs.push_back(gamma);
    if (beta.defined()) inputs.push_back(beta);
    const int gi = gamma.defined() ? 1 : -1;
    const int bi = beta.defined() ? (gamma.defined() ? 2 : 1) : -1;
    return make_op<T>(
        "group_norm", std::move(out), std::move(inputs),
        [x, gamma, st, groups, eps, gi, bi, c](const Var<T>&, const Var<T>& gv, const NeedsGrad& nd) {
            Vars<T> res(nd.size());
            const Shape& s = x.shape();
            if (grad_enabled()) {
                const Shape gs{s[0], groups, static_cast<int>(st->per)}, cs{1, c, 1, 1};
                Var<T> xr = reshape(x, gs);
                Var<T> xc = sub(xr, mean_axes(xr, {2}));
                Var<T> rstd = pow_scalar(add_scalar(mean_axes(mul(xc, xc), {2}), eps), T(-0.5));
                Var<T> xhat = mul(xc, rstd);
                if (gi >= 0 && nd[gi]) res[gi] = reshape(sum_to(mul(gv, reshape(xhat, s)), cs), Shape{c});
                if (bi >= 0 && nd[bi]) res[bi] = reshape(sum_to(gv, cs), Shape{c});
                if (nd[0]) {
                    Var<T> gh = reshape(gamma.defined() ? mul(gv, reshape(gamma, cs)) : gv, gs);
                    Var<T> inner = sub(sub(gh, mean_axes(gh, {2})), mul(xhat, mean_axes(mul(gh, xhat), {2})));
                    res[0] = reshape(mul(rstd, inner), s);
                }
                return res;
            }
            const Tensor<T>& g = gv.value();
            const Tensor<T>& xv = x.value();
            const std::size_t hw = st->hw;
            const T inv = T(1) / static_cast<T>(st->per);
            std::vector<T> dgamma(static_cast<std::size_t>(c), T(0)), dbeta(static_cast<std::size_t>(c), T(0));
            Tensor<T> dx;
            if (nd[0]) dx = Tensor<T>(s);
            for (int i = 0; i < s[0]; ++i)
                for (int gr = 0; gr < groups; ++gr) {
                    const std::size_t k = static_cast<std::size_t>(i) * groups + gr;
                    const T mu = st->mean[k], r = st->rstd[k];
                    T s1 = 0, s2 = 0;
                    for (int cc = 0; cc < st->cpg; ++cc) {
                        const int ch = gr * st->cpg + cc;
                        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                        const T gm = gamma.defined() ? gamma.value()[ch] : T(1);
                        T sg = 0, sgx = 0;
                        for (std::size_t j = 0; j < hw; ++j) {
                            const T h = (xv[base + j] - mu) * r;
                            sg += g[base + j];
                            sgx += g[base + j] * h;
                        }
                        dbeta[ch] += sg;
                        dgamma[ch] += sgx;
                        s1 += gm * sg;
                        s2 += gm * sgx;
                    }
                    if (!nd[0]) continue;
                    const T m1 = s1 * inv, m2 = s2 * inv;
                    for (int cc = 0; cc < st->cpg; ++cc) {
                        const int ch = gr * st->cpg + cc;
                        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                        const T gm = gamma.defined() ? gamma.value()[ch] : T(1);
                        for (std::size_t j = 0; j < hw; ++j) {
                            const T h = (xv[base + j] - mu) * r;
                            dx[base + j] = r * (gm * g[base + j] - m1 - h * m2);
                        }
                    }
                }
            if (nd[0]) res[0] = Var<T>::constant(std::move(dx));
            if (gi >= 0 && nd[gi]) res[gi] = Var<T>::constant(Tensor<T>(Shape{c}, std::move(dgamma)));
            if (bi >= 0 && nd[bi]) res[bi] = Var<T>::constant(Tensor<T>(Shape{c}, std::move(dbeta)));
            return res;
        });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma = {}, const Var<T>& beta = {}, T eps = T(1e-5))
{
    return group_norm(x, x.shape().at(1), gamma, beta, eps);
}

/// Training-mode batch normalization with batch statistics over (N, H, W).
/// Writes the batch mean and biased variance into `batch_mean` / `batch_var`.
/// First-order only: its backward is a fused kernel.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        std::vector<T>& batch_mean, std::vector<T>& batch_var)
{
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("batch_norm: expected NCHW, got " + to_string(xv.shape()));
    const int n = xv.dim(0), c = xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    const T m = static_cast<T>(n * hw);
    batch_mean.assign(c, T(0));
    batch_var.assign(c, T(0));
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const T* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) batch_mean[ch] += p[j];
        }
    for (auto& v : batch_mean) v /= m;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const T* p = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) batch_var[ch] += (p[j] - batch_mean[ch]) * (p[j] - batch_mean[ch]);
        }
    for (auto& v : batch_var) v /= m;

    auto xhat = std::make_shared<Tensor<T>>(xv.shape());
    auto rstd = std::make_shared<std::vector<T>>(c);
    Tensor<T> out(xv.shape());
    for (int ch = 0; ch < c; ++ch) (*rstd)[ch] = T(1) / std::sqrt(batch_var[ch] + eps);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
            const T gm = gamma.value()[ch], bt = beta.value()[ch];
            for (std::size_t j = 0; j < hw; ++j) {
                const T h = (xv[base + j] - batch_mean[ch]) * (*rstd)[ch];
                (*xhat)[base + j] = h;
                out[base + j] = h * gm + bt;
            }
        }

    return make_op<T>(
        "batch_norm", std::move(out), {x, gamma, beta},
        [xhat, rstd, gamma, n, c, hw, m](const Var<T>&, const Var<T>& gv, const NeedsGrad& nd) {
            const Tensor<T>& g = gv.value();
            std::vector<T> sg(c, T(0)), sgx(c, T(0));
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        sg[ch] += g[base + j];
                        sgx[ch] += g[base + j] * (*xhat)[base + j];
                    }
                }
            Vars<T> out(3);
            if (nd[0]) {
                Tensor<T> dx(g.shape());
                for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch) {
                        const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                        const T k = gamma.value()[ch] * (*rstd)[ch] / m;
                        for (std::size_t j = 0; j < hw; ++j)
                            dx[base + j] = k * (m * g[base + j] - sg[ch] - (*xhat)[base + j] * sgx[ch]);
                    }
                out[0] = Var<T>::constant(std::move(dx));
            }
            if (nd[1]) out[1] = Var<T>::constant(Tensor<T>(Shape{c}, sgx));
            if (nd[2]) out[2] = Var<T>::constant(Tensor<T>(Shape{c}, sg));
            return out;
        },
        /*second_order=*/false);
}

} // namespace dsa
