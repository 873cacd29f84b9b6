#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dsa/data_io.hpp"
#include "dsa/matching.hpp"
#include "dsa/synthetic.hpp"
#include "dsa/train.hpp"

namespace dsa {

/// Where a batch gets augmented during condensation.
enum class AugMode { off, siamese, independent };

inline const char* name_of(AugMode m)
{
    switch (m) {
    case AugMode::off: return "off";
    case AugMode::siamese: return "siamese";
    case AugMode::independent: return "independent";
    }
    return "?";
}

inline AugMode parse_aug_mode(const std::string& s)
{
    return parse_enum(s, {AugMode::off, AugMode::siamese, AugMode::independent}, "augmentation mode");
}

enum class InitMode { real, noise };

inline const char* name_of(InitMode m) { return m == InitMode::real ? "real" : "noise"; }
inline InitMode parse_init_mode(const std::string& s) { return parse_enum(s, {InitMode::real, InitMode::noise}, "init mode"); }

struct CondenseConfig {
    ArchSpec arch;
    int outer = 1000;      // K
    int inner = 1;         // T
    int syn_steps = 1;     // ς_S
    int net_steps = 1;     // ς_θ, passes over S per network update
    double lr_syn = 0.1;   // η_S
    double lr_net = 0.01;  // η_θ
    double momentum_syn = 0.5;
    double momentum_net = 0.5;
    int ipc = 1;
    int batch_real = 256;
    int batch_syn = 256;
    int batch_net = 256;
    AugDistribution aug = AugDistribution::combination(false);
    AugMode aug_real = AugMode::siamese;
    AugMode aug_syn = AugMode::siamese;
    bool aug_net = true;        // independent per-image augmentation in the network update
    int omegas = 1;             // transforms accumulated per matching step
    bool resample_real = false; // redraw the real batch for every ς_S step
    bool include_affine = false;
    InitMode init = InitMode::real;
    std::uint64_t seed = 0;
    double abort_loss = 1e6;
    std::vector<int> diag_iterations; // outer iterations with gradient-magnitude recording

    /// (T, ς_θ) = (1,1), (10,50), (50,10) for ipc 1, 10, 50.
    void apply_ipc_defaults()
    {
        if (ipc == 1) inner = 1, net_steps = 1;
        else if (ipc == 10) inner = 10, net_steps = 50;
        else if (ipc == 50) inner = 50, net_steps = 10;
    }

    void validate() const
    {
        auto fail = [](const std::string& m) { throw ConfigError("condense: " + m); };
        if (outer < 0) fail("outer iterations must be >= 0");
        if (inner < 1 || syn_steps < 1 || net_steps < 0 || ipc < 1 || omegas < 1) fail("iteration counts must be positive");
        if (batch_real < 1 || batch_syn < 1 || batch_net < 1) fail("batch sizes must be positive");
        if (!(lr_syn > 0) || !(lr_net > 0)) fail("learning rates must be positive");
        if (momentum_syn < 0 || momentum_syn >= 1 || momentum_net < 0 || momentum_net >= 1) fail("momentum must be in [0,1)");
        if (arch.norm == Norm::batch) fail("batch norm has no second-order support; use instance, layer, group or none");
        const bool needs_aug = aug_real != AugMode::off || aug_syn != AugMode::off || aug_net;
        if (needs_aug && aug.strategy == Strategy::none && (aug_real != AugMode::off || aug_syn != AugMode::off))
            fail("augmentation modes set but strategy is none");
    }
};

struct GradDiagnostics {
    struct Sample {
        int k, t, c;
        double syn_norm, real_norm;
    };
    std::vector<Sample> samples;

    std::vector<double> syn_norms(int k) const
    {
        std::vector<double> v;
        for (const auto& s : samples)
            if (s.k == k) v.push_back(s.syn_norm);
        return v;
    }
    std::vector<double> real_norms(int k) const
    {
        std::vector<double> v;
        for (const auto& s : samples)
            if (s.k == k) v.push_back(s.real_norm);
        return v;
    }
};

inline double median(std::vector<double> v)
{
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Counts of `v` in `bins` equal-width bins over [lo, hi]; values outside are clamped into the end bins.
inline std::vector<int> histogram(const std::vector<double>& v, int bins, double lo, double hi)
{
    std::vector<int> h(static_cast<std::size_t>(bins), 0);
    for (double x : v) {
        int b = hi > lo ? static_cast<int>((x - lo) / (hi - lo) * bins) : 0;
        h[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))]++;
    }
    return h;
}

struct CondenseResult {
    SyntheticSet set;
    GradDiagnostics diagnostics;
    bool diverged = false;
    std::string message;
    double seconds = 0;
};

/// Called after every outer iteration with k and the current set; return false to stop early.
using CondenseObserver = std::function<bool(int, const SyntheticSet&)>;

/// ipc images per class: real images drawn without replacement, or standard-normal noise.
inline SyntheticSet init_synthetic(const Dataset& d, int ipc, InitMode mode, std::mt19937_64& rng)
{
    SyntheticSet s;
    s.classes = d.classes;
    s.ipc = ipc;
    s.mean = d.mean;
    s.std = d.std;
    s.labels = even_labels(d.classes, ipc);
    const ImageShape sh = d.shape();
    s.images = Tensor<float>(Shape{d.classes * ipc, sh.channels, sh.height, sh.width});
    if (mode == InitMode::noise) {
        std::normal_distribution<float> nd(0.f, 1.f);
        for (auto& v : s.images.vec()) v = nd(rng);
        return s;
    }
    const auto idx = d.class_index();
    const std::size_t per = s.images.size() / static_cast<std::size_t>(s.images.dim(0));
    for (int c = 0; c < d.classes; ++c) {
        std::vector<int> pool = idx[static_cast<std::size_t>(c)];
        if (static_cast<int>(pool.size()) < ipc)
            throw DataError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) + " images, need "
                                + std::to_string(ipc),
                            d.name, -1);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int i = 0; i < ipc; ++i)
            std::copy_n(d.train_x.data() + static_cast<std::size_t>(pool[static_cast<std::size_t>(i)]) * per, per,
                        s.images.data() + static_cast<std::size_t>(s.first_of(c) + i) * per);
    }
    return s;
}

/// Per-class sampling without replacement, reshuffled when a class runs out.
class ClassSampler {
public:
    ClassSampler(std::vector<std::vector<int>> index, std::mt19937_64& rng)
      : index_(std::move(index)), cursor_(index_.size(), 0), rng_(rng)
    {
        for (auto& v : index_) std::shuffle(v.begin(), v.end(), rng_);
    }

    std::vector<int> next(int c, int n)
    {
        auto& pool = index_[static_cast<std::size_t>(c)];
        auto& cur = cursor_[static_cast<std::size_t>(c)];
        n = std::min<int>(n, static_cast<int>(pool.size()));
        if (cur + static_cast<std::size_t>(n) > pool.size()) {
            std::shuffle(pool.begin(), pool.end(), rng_);
            cur = 0;
        }
        std::vector<int> out(pool.begin() + static_cast<std::ptrdiff_t>(cur), pool.begin() + static_cast<std::ptrdiff_t>(cur + n));
        cur += static_cast<std::size_t>(n);
        return out;
    }

private:
    std::vector<std::vector<int>> index_;
    std::vector<std::size_t> cursor_;
    std::mt19937_64& rng_;
};

namespace detail {

template <typename T>
Var<T> augment_for_matching(const Var<T>& x, AugMode mode, const AugParam& shared, const AugDistribution& dist,
                            std::mt19937_64& rng)
{
    switch (mode) {
    case AugMode::off: return x;
    case AugMode::siamese: return apply(x, shared, dist.ranges);
    case AugMode::independent: return apply_each(x, dist, rng);
    }
    return x;
}

} // namespace detail

/// Dataset condensation with (optionally Siamese) differentiable augmentation.
///
/// for k < K: θ ← kaiming; for t < T: for each class c: ς_S matching steps on S_c against a fresh
/// real batch of class c (network fixed); then, except after the last t, ς_θ passes of SGD on
/// the augmented S. The loss trace holds the mean matching loss of every outer iteration.
inline CondenseResult condense(const CondenseConfig& cfg, const Dataset& d, CondenseObserver observer = {})
{
    cfg.validate();
    if (cfg.arch.classes != d.classes || !(cfg.arch.input == d.shape()))
        throw ConfigError("condense: architecture " + cfg.arch.name() + " does not match dataset " + d.name);
    const auto t0 = std::chrono::steady_clock::now();

    std::mt19937_64 rng_init(derive_seed(cfg.seed, {1})), rng_net(derive_seed(cfg.seed, {2})),
        rng_aug(derive_seed(cfg.seed, {3})), rng_batch(derive_seed(cfg.seed, {4}));

    CondenseResult res;
    SyntheticSet& S = res.set;
    S = init_synthetic(d, cfg.ipc, cfg.init, rng_init);
    ClassSampler sampler(d.class_index(), rng_batch);
    Sgd<float> opt_syn(cfg.lr_syn, cfg.momentum_syn);
    MatchOptions mopt;
    mopt.include_affine = cfg.include_affine;
    mopt.ranges = cfg.aug.ranges;
    const std::set<int> diag(cfg.diag_iterations.begin(), cfg.diag_iterations.end());
    const ImageShape sh = d.shape();
    const std::size_t per = static_cast<std::size_t>(sh.channels) * sh.height * sh.width;
    const AugDistribution net_aug = cfg.aug_net ? cfg.aug : AugDistribution::none();

    std::vector<Tensor<float>> syn(static_cast<std::size_t>(d.classes));
    for (int c = 0; c < d.classes; ++c) {
        std::vector<int> rows(static_cast<std::size_t>(cfg.ipc));
        std::iota(rows.begin(), rows.end(), S.first_of(c));
        syn[static_cast<std::size_t>(c)] = take_rows(S.images, rows);
    }
    auto write_back = [&] {
        for (int c = 0; c < d.classes; ++c)
            std::copy_n(syn[static_cast<std::size_t>(c)].data(), syn[static_cast<std::size_t>(c)].size(),
                        S.images.data() + static_cast<std::size_t>(S.first_of(c)) * per);
    };

    for (int k = 0; k < cfg.outer; ++k) {
        Network<float> net(cfg.arch);
        net.kaiming_init(rng_net);
        Sgd<float> opt_net(cfg.lr_net, cfg.momentum_net);
        double loss_sum = 0;
        int visits = 0;
        for (int t = 0; t < cfg.inner; ++t) {
            for (int c = 0; c < d.classes; ++c) {
                Tensor<float>& sc = syn[static_cast<std::size_t>(c)];
                std::vector<int> real_rows = sampler.next(c, cfg.batch_real);
                for (int step = 0; step < cfg.syn_steps; ++step) {
                    if (step > 0 && cfg.resample_real) real_rows = sampler.next(c, cfg.batch_real);
                    const Var<float> real = Var<float>::constant(take_rows(d.train_x, real_rows));
                    const std::vector<int> real_y(real_rows.size(), c);

                    std::vector<int> syn_rows(static_cast<std::size_t>(cfg.ipc));
                    std::iota(syn_rows.begin(), syn_rows.end(), 0);
                    if (cfg.ipc > cfg.batch_syn) {
                        std::shuffle(syn_rows.begin(), syn_rows.end(), rng_batch);
                        syn_rows.resize(static_cast<std::size_t>(cfg.batch_syn));
                    }
                    const bool whole = static_cast<int>(syn_rows.size()) == cfg.ipc;
                    Var<float> leaf = Var<float>::leaf(whole ? sc : take_rows(sc, syn_rows));
                    const std::vector<int> syn_y(syn_rows.size(), c);

                    Var<float> total;
                    for (int w = 0; w < cfg.omegas; ++w) {
                        const AugParam omega = sample_omega(cfg.aug, sh.height, sh.width, rng_aug);
                        Var<float> ra = detail::augment_for_matching(real, cfg.aug_real, omega, cfg.aug, rng_aug);
                        Var<float> sa = detail::augment_for_matching(leaf, cfg.aug_syn, omega, cfg.aug, rng_aug);
                        MatchTerms<float> m = match_gradients(net, sa, syn_y, ra, real_y, mopt);
                        if (diag.count(k) && w == 0 && step == 0)
                            res.diagnostics.samples.push_back({k, t, c, grad_norm(m.syn), grad_norm(m.real)});
                        total = total.defined() ? add(total, m.loss.value) : m.loss.value;
                    }
                    const double lv = static_cast<double>(total.item());
                    if (!std::isfinite(lv) || lv > cfg.abort_loss) {
                        write_back();
                        res.diverged = true;
                        res.message = "matching loss " + std::to_string(lv) + " at k=" + std::to_string(k) + " t="
                                      + std::to_string(t) + " class " + std::to_string(c);
                        S.loss_trace.push_back(lv);
                        res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                        return res;
                    }
                    if (step == 0) {
                        loss_sum += lv;
                        ++visits;
                    }
                    const Tensor<float> g = gradient(total, {leaf}).values[0].value();
                    if (!std::all_of(g.vec().begin(), g.vec().end(), [](float v) { return std::isfinite(v); })) {
                        write_back();
                        res.diverged = true;
                        res.message = "non-finite synthetic gradient at k=" + std::to_string(k) + " class " + std::to_string(c);
                        S.loss_trace.push_back(lv);
                        res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                        return res;
                    }
                    if (whole) {
                        opt_syn.step(static_cast<std::size_t>(c), sc, g);
                    } else {
                        // momentum buffers cover the whole class; scatter the partial gradient
                        Tensor<float> full(sc.shape());
                        for (std::size_t r = 0; r < syn_rows.size(); ++r)
                            std::copy_n(g.data() + r * per, per, full.data() + static_cast<std::size_t>(syn_rows[r]) * per);
                        opt_syn.step(static_cast<std::size_t>(c), sc, full);
                    }
                }
            }
            if (t == cfg.inner - 1) break;
            write_back();
            for (int e = 0; e < cfg.net_steps; ++e)
                train_epoch(net, S.images, S.labels, std::min(cfg.batch_net, S.images.dim(0)), opt_net, net_aug, rng_aug);
        }
        write_back();
        S.loss_trace.push_back(loss_sum / std::max(visits, 1));
        if (observer && !observer(k, S)) break;
    }
    write_back();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace dsa
