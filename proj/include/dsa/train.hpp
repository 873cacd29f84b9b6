#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "dsa/augment.hpp"
#include "dsa/model.hpp"

namespace dsa {

/// SGD with heavy-ball momentum and L2 weight decay: b = m b + (g + wd p); p -= lr b.
template <typename T>
class Sgd {
public:
    Sgd(double lr, double momentum = 0.0, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), wd_(weight_decay)
    { }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    /// Updates one parameter tensor; `slot` identifies its momentum buffer.
    void step(std::size_t slot, Tensor<T>& p, const Tensor<T>& g)
    {
        if (slot >= buf_.size()) buf_.resize(slot + 1);
        Tensor<T>& b = buf_[slot];
        const bool fresh = b.size() != p.size();
        if (fresh) b = Tensor<T>(p.shape());
        const T lr = static_cast<T>(lr_), m = static_cast<T>(momentum_), wd = static_cast<T>(wd_);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T d = g[i] + wd * p[i];
            b[i] = fresh ? d : m * b[i] + d;
            p[i] -= lr * b[i];
        }
    }

    void step(std::vector<Var<T>>& params, const std::vector<Var<T>>& grads)
    {
        for (std::size_t i = 0; i < params.size(); ++i) step(i, params[i].mutable_value(), grads[i].value());
    }

private:
    double lr_, momentum_, wd_;
    std::vector<Tensor<T>> buf_;
};

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<int>& rows)
{
    Shape s = x.shape();
    s[0] = static_cast<int>(rows.size());
    Tensor<T> out(s);
    const std::size_t per = x.size() / static_cast<std::size_t>(x.dim(0));
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy_n(x.data() + static_cast<std::size_t>(rows[r]) * per, per, out.data() + r * per);
    return out;
}

template <typename T>
std::vector<T> take(const std::vector<T>& v, const std::vector<int>& rows)
{
    std::vector<T> out;
    out.reserve(rows.size());
    for (int r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
    return out;
}

/// One pass over (x, y) in shuffled minibatches, optionally with independent per-image augmentation.
/// Returns the mean training loss.
template <typename T>
double train_epoch(Network<T>& net, const Tensor<T>& x, const std::vector<int>& y, int batch, Sgd<T>& opt,
                   const AugDistribution& aug, std::mt19937_64& rng)
{
    const int n = x.dim(0);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    net.train(true);
    double total = 0;
    for (int b0 = 0; b0 < n; b0 += batch) {
        const std::vector<int> rows(order.begin() + b0, order.begin() + std::min(n, b0 + batch));
        Var<T> xb = Var<T>::constant(take_rows(x, rows));
        {
            NoGrad ng;
            xb = apply_each(xb, aug, rng);
        }
        Var<T> loss = softmax_cross_entropy(net.forward(xb), take(y, rows));
        auto g = gradient(loss, net.parameters());
        opt.step(net.parameters(), g.values);
        total += static_cast<double>(loss.item()) * static_cast<double>(rows.size());
    }
    return total / n;
}

/// Arg-max predictions in evaluation mode.
template <typename T>
std::vector<int> predict(Network<T>& net, const Tensor<T>& x, int batch = 500)
{
    NoGrad ng;
    const bool was = net.training();
    net.train(false);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(x.dim(0)));
    std::vector<int> rows;
    for (int b0 = 0; b0 < x.dim(0); b0 += batch) {
        rows.clear();
        for (int i = b0; i < std::min(x.dim(0), b0 + batch); ++i) rows.push_back(i);
        const Tensor<T> logits = net.forward(Var<T>::constant(take_rows(x, rows))).value();
        const int c = logits.dim(1);
        for (int r = 0; r < logits.dim(0); ++r) {
            const T* p = logits.data() + static_cast<std::size_t>(r) * c;
            out.push_back(static_cast<int>(std::max_element(p, p + c) - p));
        }
    }
    net.train(was);
    return out;
}

/// Stream of independent seeds derived from one root seed and a path of indices.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path)
{
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32)};
    for (auto p : path) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

} // namespace dsa
