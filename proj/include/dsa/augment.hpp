#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dsa/core/ops.hpp"

namespace dsa {

enum class AugKind { identity, crop, cutout, flip, scale, rotate, color };

inline const char* name_of(AugKind k)
{
    switch (k) {
    case AugKind::identity: return "identity";
    case AugKind::crop: return "crop";
    case AugKind::cutout: return "cutout";
    case AugKind::flip: return "flip";
    case AugKind::scale: return "scale";
    case AugKind::rotate: return "rotate";
    case AugKind::color: return "color";
    }
    return "?";
}

inline AugKind parse_aug_kind(const std::string& s)
{
    for (AugKind k : {AugKind::crop, AugKind::cutout, AugKind::flip, AugKind::scale, AugKind::rotate, AugKind::color})
        if (s == name_of(k)) return k;
    throw ConfigError("unknown augmentation '" + s + "'");
}

/// One concrete transform ω. Fields not used by `kind` keep their identity values.
struct AugParam {
    AugKind kind = AugKind::identity;
    int dy = 0, dx = 0;           // crop shift
    int cy = 0, cx = 0, side = 0; // cutout square
    bool flip = false;
    double scale = 1.0;
    double angle = 0.0;           // degrees
    double brightness = 0.5, saturation = 1.0, contrast = 1.0;

    bool operator==(const AugParam&) const = default;

    std::string describe() const
    {
        switch (kind) {
        case AugKind::identity: return "identity";
        case AugKind::crop: return "crop(" + std::to_string(dy) + "," + std::to_string(dx) + ")";
        case AugKind::cutout:
            return "cutout(" + std::to_string(cy) + "," + std::to_string(cx) + ",side=" + std::to_string(side) + ")";
        case AugKind::flip: return flip ? "flip" : "flip(off)";
        case AugKind::scale: return "scale(" + std::to_string(scale) + ")";
        case AugKind::rotate: return "rotate(" + std::to_string(angle) + ")";
        case AugKind::color:
            return "color(" + std::to_string(brightness) + "," + std::to_string(saturation) + "," + std::to_string(contrast)
                   + ")";
        }
        return "?";
    }
};

/// Parameter ranges. Pads and sides are fractions of the image height, rounded up.
struct AugRanges {
    double crop_frac = 0.125;
    double cutout_frac = 0.5;
    double scale_max = 1.2;
    double rotate_deg = 15.0;
    double brightness_amp = 1.0;
    double brightness_lo = 0.0, brightness_hi = 1.0;
    double saturation_lo = 0.0, saturation_hi = 2.0;
    double contrast_lo = 0.5, contrast_hi = 1.5;

    int crop_pad(int h) const { return static_cast<int>(std::ceil(crop_frac * h)); }
    int cutout_side(int h) const { return static_cast<int>(std::ceil(cutout_frac * h)); }

    bool operator==(const AugRanges&) const = default;
};

enum class Strategy { none, single, combination };

/// Ω: which transforms are drawn and from what ranges.
struct AugDistribution {
    Strategy strategy = Strategy::none;
    AugKind kind = AugKind::identity; // for Strategy::single
    AugRanges ranges;
    bool digits = false;              // drop flip from the combination

    static AugDistribution none() { return {}; }
    static AugDistribution single(AugKind k)
    {
        AugDistribution d;
        d.strategy = Strategy::single;
        d.kind = k;
        return d;
    }
    static AugDistribution combination(bool digits)
    {
        AugDistribution d;
        d.strategy = Strategy::combination;
        d.digits = digits;
        return d;
    }

    /// "none", a kind name, or "combination".
    static AugDistribution parse(const std::string& s, bool digits)
    {
        if (s == "none") return none();
        if (s == "combination") return combination(digits);
        return single(parse_aug_kind(s));
    }

    std::string name() const
    {
        switch (strategy) {
        case Strategy::none: return "none";
        case Strategy::single: return name_of(kind);
        case Strategy::combination: return "combination";
        }
        return "?";
    }

    std::vector<AugKind> admissible() const
    {
        switch (strategy) {
        case Strategy::none: return {};
        case Strategy::single: return {kind};
        case Strategy::combination:
            if (digits) return {AugKind::color, AugKind::crop, AugKind::cutout, AugKind::scale, AugKind::rotate};
            return {AugKind::color, AugKind::crop, AugKind::cutout, AugKind::flip, AugKind::scale, AugKind::rotate};
        }
        return {};
    }

    bool operator==(const AugDistribution&) const = default;
};

/// Draws one ω for images of size h×w. Strategy none yields the identity.
inline AugParam sample_omega(const AugDistribution& dist, int h, int w, std::mt19937_64& rng)
{
    AugParam p;
    if (dist.strategy == Strategy::none) return p;
    const auto kinds = dist.admissible();
    if (kinds.empty() || (dist.strategy == Strategy::single && dist.kind == AugKind::identity))
        throw ConfigError("augmentation: no admissible transform");
    const AugRanges& r = dist.ranges;
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto integer = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    p.kind = kinds[static_cast<std::size_t>(integer(0, static_cast<int>(kinds.size()) - 1))];
    switch (p.kind) {
    case AugKind::crop: {
        const int pad = r.crop_pad(h);
        p.dy = integer(-pad, pad);
        p.dx = integer(-pad, pad);
        break;
    }
    case AugKind::cutout:
        p.side = r.cutout_side(h);
        p.cy = integer(0, h - 1);
        p.cx = integer(0, w - 1);
        break;
    case AugKind::flip: p.flip = integer(0, 1) == 1; break;
    case AugKind::scale: p.scale = uniform(1.0 / r.scale_max, r.scale_max); break;
    case AugKind::rotate: p.angle = uniform(-r.rotate_deg, r.rotate_deg); break;
    case AugKind::color:
        p.brightness = uniform(r.brightness_lo, r.brightness_hi);
        p.saturation = uniform(r.saturation_lo, r.saturation_hi);
        p.contrast = uniform(r.contrast_lo, r.contrast_hi);
        break;
    case AugKind::identity: break;
    }
    return p;
}

inline void check_range(const AugParam& p, int h, const AugRanges& r)
{
    auto fail = [&](const std::string& why) { throw ConfigError("augmentation " + p.describe() + ": " + why); };
    constexpr double slack = 1e-12;
    switch (p.kind) {
    case AugKind::crop: {
        const int pad = r.crop_pad(h);
        if (std::abs(p.dy) > pad || std::abs(p.dx) > pad) fail("shift exceeds pad " + std::to_string(pad));
        break;
    }
    case AugKind::cutout:
        if (p.side < 0 || p.side > r.cutout_side(h)) fail("side outside [0," + std::to_string(r.cutout_side(h)) + "]");
        break;
    case AugKind::scale:
        if (!(p.scale >= 1.0 / r.scale_max - slack && p.scale <= r.scale_max + slack)) fail("factor out of range");
        break;
    case AugKind::rotate:
        if (!(std::abs(p.angle) <= r.rotate_deg + slack)) fail("angle out of range");
        break;
    case AugKind::color:
        if (!(p.brightness >= r.brightness_lo && p.brightness <= r.brightness_hi)) fail("brightness out of range");
        if (!(p.saturation >= r.saturation_lo && p.saturation <= r.saturation_hi)) fail("saturation out of range");
        if (!(p.contrast >= r.contrast_lo && p.contrast <= r.contrast_hi)) fail("contrast out of range");
        break;
    case AugKind::flip:
    case AugKind::identity: break;
    }
}

namespace detail {

inline std::shared_ptr<kernels::SpatialPlan> empty_plan(int h, int w)
{
    auto plan = std::make_shared<kernels::SpatialPlan>();
    plan->h = h;
    plan->w = w;
    plan->index.assign(plan->pixels(), {-1, -1, -1, -1});
    plan->weight.assign(plan->pixels(), {0, 0, 0, 0});
    return plan;
}

inline PlanPtr shift_plan(int h, int w, int dy, int dx)
{
    auto plan = empty_plan(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const int si = i + dy, sj = j + dx;
            if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
            const auto o = static_cast<std::size_t>(i) * w + j;
            plan->index[o][0] = si * w + sj;
            plan->weight[o][0] = 1.0;
        }
    return plan;
}

inline PlanPtr mirror_plan(int h, int w)
{
    auto plan = empty_plan(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const auto o = static_cast<std::size_t>(i) * w + j;
            plan->index[o][0] = i * w + (w - 1 - j);
            plan->weight[o][0] = 1.0;
        }
    return plan;
}

/// Bilinear warp about the image center: output pixel p reads source c + A (p - c).
inline PlanPtr warp_plan(int h, int w, double a00, double a01, double a10, double a11)
{
    auto plan = empty_plan(h, w);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    auto snap = [](double v) {
        const double r = std::round(v);
        return std::abs(v - r) < 1e-9 ? r : v;
    };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double y = snap(cy + a00 * (i - cy) + a01 * (j - cx));
            const double x = snap(cx + a10 * (i - cy) + a11 * (j - cx));
            const double y0 = std::floor(y), x0 = std::floor(x);
            const double fy = y - y0, fx = x - x0;
            const auto o = static_cast<std::size_t>(i) * w + j;
            const int iy = static_cast<int>(y0), ix = static_cast<int>(x0);
            const int ty[4] = {iy, iy, iy + 1, iy + 1}, tx[4] = {ix, ix + 1, ix, ix + 1};
            const double tw[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            for (int t = 0; t < 4; ++t) {
                if (tw[t] == 0.0 || ty[t] < 0 || ty[t] >= h || tx[t] < 0 || tx[t] >= w) continue;
                plan->index[o][t] = ty[t] * w + tx[t];
                plan->weight[o][t] = tw[t];
            }
        }
    return plan;
}

template <typename T>
Tensor<T> cutout_mask(int h, int w, int cy, int cx, int side)
{
    Tensor<T> m(Shape{1, 1, h, w}, T(1));
    const int y0 = cy - side / 2, x0 = cx - side / 2;
    for (int i = std::max(0, y0); i < std::min(h, y0 + side); ++i)
        for (int j = std::max(0, x0); j < std::min(w, x0 + side); ++j) m[static_cast<std::size_t>(i) * w + j] = T(0);
    return m;
}

} // namespace detail

/// Applies ω to every image of an NCHW batch. Identity parameters return the input untouched.
template <typename T>
Var<T> apply(const Var<T>& x, const AugParam& p, const AugRanges& ranges = {})
{
    const Shape& s = x.shape();
    if (s.size() != 4 || s[0] < 1) throw ShapeError("augment: expected a nonempty NCHW batch, got " + to_string(s));
    const int h = s[2], w = s[3];
    check_range(p, h, ranges);
    switch (p.kind) {
    case AugKind::identity: return x;
    case AugKind::crop:
        if (p.dy == 0 && p.dx == 0) return x;
        return spatial_map(x, detail::shift_plan(h, w, p.dy, p.dx));
    case AugKind::cutout:
        if (p.side == 0) return x;
        return mul(x, Var<T>::constant(detail::cutout_mask<T>(h, w, p.cy, p.cx, p.side)));
    case AugKind::flip:
        if (!p.flip) return x;
        return spatial_map(x, detail::mirror_plan(h, w));
    case AugKind::scale:
        if (p.scale == 1.0) return x;
        return spatial_map(x, detail::warp_plan(h, w, 1.0 / p.scale, 0.0, 0.0, 1.0 / p.scale));
    case AugKind::rotate: {
        if (p.angle == 0.0) return x;
        const double t = p.angle * std::numbers::pi / 180.0;
        const double c = std::cos(t), sn = std::sin(t);
        return spatial_map(x, detail::warp_plan(h, w, c, sn, -sn, c));
    }
    case AugKind::color: {
        Var<T> y = x;
        if (p.brightness != 0.5) y = add_scalar(y, static_cast<T>((p.brightness - 0.5) * ranges.brightness_amp));
        if (p.saturation != 1.0) {
            Var<T> m = mean_axes(y, {1});
            y = add(m, scale(sub(y, m), static_cast<T>(p.saturation)));
        }
        if (p.contrast != 1.0) {
            Var<T> m = mean_axes(y, {1, 2, 3});
            y = add(m, scale(sub(y, m), static_cast<T>(p.contrast)));
        }
        return y;
    }
    }
    return x;
}

/// Same ω on the real and the synthetic batch.
template <typename T>
std::pair<Var<T>, Var<T>> siamese_apply(const Var<T>& real, const Var<T>& syn, const AugParam& p,
                                        const AugRanges& ranges = {})
{
    const Shape &a = real.shape(), &b = syn.shape();
    if (a.size() != 4 || b.size() != 4 || a[1] != b[1] || a[2] != b[2] || a[3] != b[3])
        throw ShapeError("siamese_apply: real " + to_string(a) + " and synthetic " + to_string(b)
                         + " differ in C, H or W");
    return {apply(real, p, ranges), apply(syn, p, ranges)};
}

/// Independent ω per image (the non-Siamese A).
template <typename T>
Var<T> apply_each(const Var<T>& x, const AugDistribution& dist, std::mt19937_64& rng)
{
    if (dist.strategy == Strategy::none) return x;
    const int n = x.shape().at(0), h = x.shape().at(2), w = x.shape().at(3);
    Vars<T> parts;
    parts.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) parts.push_back(apply(slice0(x, i, i + 1), sample_omega(dist, h, w, rng), dist.ranges));
    return concat0(parts);
}

} // namespace dsa
