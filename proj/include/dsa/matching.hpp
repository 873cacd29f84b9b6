#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dsa/augment.hpp"
#include "dsa/model.hpp"

namespace dsa {

template <typename T>
struct MatchingLoss {
    Var<T> value;
    std::vector<double> per_layer;

    double item() const { return static_cast<double>(value.item()); }
};

/// Σ_layers Σ_nodes 1 − ⟨a,b⟩ / max(‖a‖‖b‖, eps). A zero-norm node contributes 1.
template <typename T>
MatchingLoss<T> layer_gradient_distance(const GradSet<T>& ga, const GradSet<T>& gb, T eps = T(1e-6))
{
    if (ga.layers.size() != gb.layers.size())
        throw ShapeError("gradient distance: " + std::to_string(ga.layers.size()) + " vs "
                         + std::to_string(gb.layers.size()) + " layers");
    MatchingLoss<T> out;
    out.value = Var<T>::constant(Tensor<T>::scalar(T(0)));
    // guards sqrt at zero; far below any norm that survives the eps clamp
    const T tiny = T(1e-30);
    for (std::size_t l = 0; l < ga.layers.size(); ++l) {
        const Var<T>&a = ga.layers[l], &b = gb.layers[l];
        if (a.shape() != b.shape())
            throw ShapeError("gradient distance: layer " + std::to_string(l) + " rows " + to_string(a.shape()) + " vs "
                             + to_string(b.shape()));
        Var<T> dot = sum_axes(mul(a, b), {1});
        Var<T> na = pow_scalar(clamp_min(sum_axes(mul(a, a), {1}), tiny), T(0.5));
        Var<T> nb = pow_scalar(clamp_min(sum_axes(mul(b, b), {1}), tiny), T(0.5));
        Var<T> cos = div(dot, clamp_min(mul(na, nb), eps));
        Var<T> d = add_scalar(neg(sum(cos)), static_cast<T>(a.shape()[0]));
        out.per_layer.push_back(static_cast<double>(d.item()));
        out.value = add(out.value, d);
    }
    return out;
}

struct MatchOptions {
    double eps = 1e-6;
    bool include_affine = false;
    AugRanges ranges;
};

namespace detail {

inline int single_class(const std::vector<int>& labels, const char* which)
{
    if (labels.empty()) throw Error(std::string("matching: empty ") + which + " batch");
    for (int y : labels)
        if (y != labels.front())
            throw Error(std::string("matching: ") + which + " batch mixes classes " + std::to_string(labels.front())
                        + " and " + std::to_string(y));
    return labels.front();
}

} // namespace detail

template <typename T>
struct MatchTerms {
    MatchingLoss<T> loss;
    GradSet<T> syn, real;
};

/// D between the gradients of already-augmented batches. The real branch is a constant w.r.t.
/// the synthetic pixels; the synthetic branch keeps its graph for the second backward pass.
template <typename T>
MatchTerms<T> match_gradients(Network<T>& net, const Var<T>& syn, const std::vector<int>& syn_labels,
                              const Var<T>& real, const std::vector<int>& real_labels, const MatchOptions& opt = {})
{
    const int cs = detail::single_class(syn_labels, "synthetic");
    const int cr = detail::single_class(real_labels, "real");
    if (cs != cr) throw Error("matching: synthetic class " + std::to_string(cs) + " vs real class " + std::to_string(cr));
    MatchTerms<T> out;
    out.real = weight_gradients(net, real.detach(), real_labels, false, opt.include_affine);
    for (auto& l : out.real.layers) l = l.detach();
    out.syn = weight_gradients(net, syn, syn_labels, true, opt.include_affine);
    out.loss = layer_gradient_distance(out.syn, out.real, static_cast<T>(opt.eps));
    return out;
}

/// D(∇θL(A(S,ω)), ∇θL(A(T,ω))) for one class.
template <typename T>
MatchingLoss<T> matching_loss(Network<T>& net, const Var<T>& syn, const std::vector<int>& syn_labels,
                              const Var<T>& real, const std::vector<int>& real_labels, const AugParam& omega,
                              const MatchOptions& opt = {})
{
    auto [ra, sa] = siamese_apply(real.detach(), syn, omega, opt.ranges);
    return match_gradients(net, sa, syn_labels, ra, real_labels, opt).loss;
}

/// L2 norm over every row of every layer.
template <typename T>
double grad_norm(const GradSet<T>& g)
{
    double s = 0;
    for (const auto& l : g.layers)
        for (T v : l.value().vec()) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

/// Sum of matching losses over a list of ω.
template <typename T>
MatchingLoss<T> matching_loss_multi(Network<T>& net, const Var<T>& syn, const std::vector<int>& syn_labels,
                                    const Var<T>& real, const std::vector<int>& real_labels,
                                    const std::vector<AugParam>& omegas, const MatchOptions& opt = {})
{
    if (omegas.empty()) throw Error("matching: empty transform list");
    MatchingLoss<T> total;
    for (const AugParam& w : omegas) {
        MatchingLoss<T> one = matching_loss(net, syn, syn_labels, real, real_labels, w, opt);
        if (!total.value.defined()) {
            total = std::move(one);
            continue;
        }
        total.value = add(total.value, one.value);
        for (std::size_t l = 0; l < one.per_layer.size(); ++l) total.per_layer[l] += one.per_layer[l];
    }
    return total;
}

} // namespace dsa
