#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/eval.hpp"

namespace dsa {

struct NasAxes {
    std::vector<int> depths, widths;
    std::vector<Activation> activations;
    std::vector<Norm> norms;
    std::vector<Pooling> poolings;

    std::size_t size() const { return depths.size() * widths.size() * activations.size() * norms.size() * poolings.size(); }

    /// 4·4·3·5·3 = 720.
    static NasAxes full()
    {
        return {{1, 2, 3, 4},
                {32, 64, 128, 256},
                {Activation::relu, Activation::leakyrelu, Activation::sigmoid},
                {Norm::instance, Norm::batch, Norm::layer, Norm::group, Norm::none},
                {Pooling::avg, Pooling::max, Pooling::none}};
    }

    /// 2·2·2·3·1 = 24.
    static NasAxes desk()
    {
        return {{2, 3}, {16, 32}, {Activation::relu, Activation::sigmoid}, {Norm::instance, Norm::batch, Norm::none}, {Pooling::avg}};
    }
};

struct NasGrid {
    NasAxes axes;
    std::vector<ArchSpec> specs;
    std::vector<std::string> invalid; // empty when the spec is usable, otherwise the reason

    std::size_t size() const { return specs.size(); }
    bool valid(std::size_t i) const { return invalid[i].empty(); }
};

/// Cartesian product in lexicographic axis order (depth outermost, pooling innermost). Specs that
/// cannot be built for the input are kept and flagged.
inline NasGrid enumerate(const NasAxes& axes, ImageShape input, int classes)
{
    if (axes.size() == 0) throw ConfigError("nas: every grid axis needs at least one value");
    NasGrid g;
    g.axes = axes;
    for (int depth : axes.depths)
        for (int width : axes.widths)
            for (Activation act : axes.activations)
                for (Norm norm : axes.norms)
                    for (Pooling pool : axes.poolings) {
                        ArchSpec s = ArchSpec::convnet(input, classes, width, depth);
                        s.activation = act;
                        s.norm = norm;
                        s.pooling = pool;
                        std::string why;
                        try {
                            validate(s);
                            convnet_feature_size(s);
                        } catch (const Error& e) {
                            why = e.what();
                        }
                        g.specs.push_back(s);
                        g.invalid.push_back(why);
                    }
    return g;
}

/// Ranks starting at 1; tied values share the average of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Spearman's ρ as the Pearson correlation of average ranks (equal to 1 − 6Σd²/(n(n²−1)) without ties).
/// NaN when either list is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size())
        throw Error("spearman: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
    if (a.size() < 2) throw Error("spearman: need at least 2 pairs, got " + std::to_string(a.size()));
    const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
    const double m = 0.5 * static_cast<double>(a.size() + 1);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (ra[i] - m) * (rb[i] - m);
        saa += (ra[i] - m) * (ra[i] - m);
        sbb += (rb[i] - m) * (rb[i] - m);
    }
    if (saa == 0 || sbb == 0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
    return h;
}

} // namespace detail

struct ProxyScores {
    std::vector<double> scores;      // NaN where the architecture is invalid or failed
    std::vector<std::string> errors; // per-arch failure message
    double seconds = 0;
};

/// Trains every valid grid architecture on (x, y) with cfg (arch replaced) and scores it on the
/// test split. `max_steps` > 0 caps the number of SGD steps. Seeds depend on the spec, not its
/// position, so identical specs score identically.
inline ProxyScores proxy_rank(const NasGrid& grid, const Tensor<float>& x, const std::vector<int>& y, const EvalConfig& cfg,
                              const Dataset& d, int jobs = 1, long max_steps = 0)
{
    const auto t0 = std::chrono::steady_clock::now();
    ProxyScores out;
    out.scores.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    out.errors.assign(grid.size(), std::string());
    parallel_for(static_cast<int>(grid.size()), jobs, [&](int i) {
        const auto u = static_cast<std::size_t>(i);
        if (!grid.valid(u)) {
            out.errors[u] = grid.invalid[u];
            return;
        }
        try {
            EvalConfig c = cfg;
            c.arch = grid.specs[u];
            std::mt19937_64 rng(derive_seed(cfg.seed, {300, detail::fnv1a(c.arch.name())}));
            if (max_steps > 0) {
                // whole-set training truncated to max_steps minibatches, lr decayed at the halfway step
                Network<float> net(c.arch);
                net.kaiming_init(rng);
                Sgd<float> opt(c.lr, c.momentum, c.weight_decay);
                const int batch = std::max(1, std::min(c.batch, x.dim(0)));
                const long per_epoch = (x.dim(0) + batch - 1) / batch;
                long done = 0;
                while (done < max_steps) {
                    opt.set_lr(done >= max_steps / 2 ? c.lr * c.decay : c.lr);
                    const long chunk = std::min(per_epoch, max_steps - done);
                    std::vector<int> rows(static_cast<std::size_t>(x.dim(0)));
                    std::iota(rows.begin(), rows.end(), 0);
                    std::shuffle(rows.begin(), rows.end(), rng);
                    rows.resize(static_cast<std::size_t>(std::min<long>(x.dim(0), chunk * batch)));
                    train_epoch(net, take_rows(x, rows), take(y, rows), batch, opt, c.aug, rng);
                    done += chunk;
                }
                out.scores[u] = test_accuracy(net, d);
            } else {
                Network<float> net = train_classifier(x, y, c, rng);
                out.scores[u] = test_accuracy(net, d);
            }
            if (!std::isfinite(out.scores[u])) out.errors[u] = "non-finite score";
        } catch (const std::exception& e) {
            out.errors[u] = e.what();
        }
    });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// Indices of the top `frac` of architectures by reference score (at least two), ties broken by grid order.
inline std::vector<std::size_t> top_by_reference(const std::vector<double>& ref, double frac)
{
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ref.size(); ++i)
        if (std::isfinite(ref[i])) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ref[a] > ref[b]; });
    const auto k = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(idx.size())));
    idx.resize(std::min(idx.size(), std::max<std::size_t>(2, k)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// ρ over the given indices where both scores are finite; NaN with fewer than two such pairs.
inline double spearman_on(const std::vector<double>& a, const std::vector<double>& b, const std::vector<std::size_t>& idx)
{
    std::vector<double> x, y;
    for (std::size_t i : idx)
        if (std::isfinite(a[i]) && std::isfinite(b[i])) {
            x.push_back(a[i]);
            y.push_back(b[i]);
        }
    if (x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return spearman(x, y);
}

struct ProxyStudy {
    std::string name;
    ProxyScores scores;
    double rho = 0, rho_top = 0;
    std::size_t best = 0;        // architecture with the highest proxy score
    double best_reference = 0;   // its whole-set reference accuracy
    double seconds = 0;          // proxy construction plus scoring
    long storage = 0;            // images the proxy keeps
};

struct RankStudy {
    std::vector<std::string> archs;
    std::vector<std::string> invalid;
    ProxyScores reference;
    std::vector<std::size_t> top;
    std::vector<ProxyStudy> proxies;
    std::string config;

    nlohmann::json to_json() const
    {
        auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
        auto list = [&](const std::vector<double>& v) {
            nlohmann::json a = nlohmann::json::array();
            for (double x : v) a.push_back(num(x));
            return a;
        };
        nlohmann::json j;
        j["archs"] = archs;
        j["invalid"] = invalid;
        j["reference"] = {{"scores", list(reference.scores)}, {"errors", reference.errors}, {"seconds", reference.seconds}};
        j["top"] = top;
        j["config"] = config;
        j["proxies"] = nlohmann::json::array();
        for (const auto& p : proxies)
            j["proxies"].push_back({{"name", p.name},
                                    {"scores", list(p.scores.scores)},
                                    {"errors", p.scores.errors},
                                    {"rho", num(p.rho)},
                                    {"rho_top", num(p.rho_top)},
                                    {"best", archs.empty() ? "" : archs[p.best]},
                                    {"best_reference", num(p.best_reference)},
                                    {"seconds", p.seconds},
                                    {"storage", p.storage}});
        return j;
    }

    /// One "proxy reference arch" line per architecture.
    std::string scatter(const ProxyStudy& p) const
    {
        std::ostringstream os;
        os << std::setprecision(17) << "# " << p.name << "\tproxy\treference\tarch\n";
        for (std::size_t i = 0; i < archs.size(); ++i)
            os << p.scores.scores[i] << "\t" << reference.scores[i] << "\t" << archs[i] << "\n";
        return os.str();
    }

    std::string to_text() const
    {
        std::ostringstream os;
        std::istringstream cfg(config);
        for (std::string line; std::getline(cfg, line);) os << "# " << line << "\n";
        os << std::fixed << std::setprecision(4);
        os << "proxy\trho\trho_top\tbest_arch\tbest_ref\tseconds\tstorage\n";
        for (const auto& p : proxies)
            os << p.name << "\t" << p.rho << "\t" << p.rho_top << "\t" << archs[p.best] << "\t" << p.best_reference << "\t"
               << std::setprecision(1) << p.seconds << std::setprecision(4) << "\t" << p.storage << "\n";
        os << "reference\t-\t-\t-\t-\t" << std::setprecision(1) << reference.seconds << "\t-\n";
        return os.str();
    }
};

struct StudyConfig {
    EvalConfig reference;      // whole-set training; arch ignored
    EvalConfig proxy;          // small-set training; arch ignored
    CondenseConfig condense;   // produces the DSA proxy set
    int ipc = 10;              // proxy images per class
    double top_frac = 0.05;
    bool random = true, dsa = true, early_stop = true;
};

/// Scores the grid on whole-set reference training and on each proxy; correlates the two.
/// `dsa_set` may carry a precomputed condensed set; otherwise one is condensed here.
inline RankStudy study(const NasGrid& grid, const Dataset& d, const StudyConfig& sc, int jobs = 1,
                       const SyntheticSet* dsa_set = nullptr)
{
    RankStudy r;
    for (const auto& s : grid.specs) r.archs.push_back(s.name());
    r.invalid = grid.invalid;
    r.reference = proxy_rank(grid, d.train_x, d.train_y, sc.reference, d, jobs);
    r.top = top_by_reference(r.reference.scores, sc.top_frac);

    auto finish = [&](ProxyStudy p) {
        std::vector<std::size_t> all(grid.size());
        std::iota(all.begin(), all.end(), 0);
        p.rho = spearman_on(p.scores.scores, r.reference.scores, all);
        p.rho_top = spearman_on(p.scores.scores, r.reference.scores, r.top);
        double best = -1;
        for (std::size_t i = 0; i < grid.size(); ++i)
            if (std::isfinite(p.scores.scores[i]) && p.scores.scores[i] > best) best = p.scores.scores[i], p.best = i;
        p.best_reference = r.reference.scores[p.best];
        p.seconds += p.scores.seconds;
        r.proxies.push_back(std::move(p));
    };
    auto small = [&](const std::string& name, const SyntheticSet& s, double build_seconds) {
        ProxyStudy p;
        p.name = name;
        p.scores = proxy_rank(grid, s.images, s.labels, sc.proxy, d, jobs);
        p.seconds = build_seconds;
        p.storage = s.images.dim(0);
        finish(std::move(p));
    };
    if (sc.random) {
        std::mt19937_64 rng(derive_seed(sc.proxy.seed, {400}));
        small("random", random_coreset(d, sc.ipc, rng), 0.0);
    }
    if (sc.dsa) {
        if (dsa_set) {
            small("dsa", *dsa_set, 0.0);
        } else {
            CondenseConfig cc = sc.condense;
            cc.ipc = sc.ipc;
            CondenseResult res = condense(cc, d);
            if (res.diverged) throw DivergenceError("nas: DSA proxy condensation: " + res.message);
            small("dsa", res.set, res.seconds);
        }
    }
    if (sc.early_stop) {
        // same number of SGD steps as the small proxies, drawn from the whole training set
        const int n = d.classes * sc.ipc;
        const long steps = static_cast<long>(sc.proxy.epochs) * ((n + std::min(sc.proxy.batch, n) - 1) / std::min(sc.proxy.batch, n));
        EvalConfig ec = sc.proxy;
        ec.batch = std::min(sc.proxy.batch, n);
        ProxyStudy p;
        p.name = "early_stop";
        p.scores = proxy_rank(grid, d.train_x, d.train_y, ec, d, jobs, steps);
        p.storage = d.train_size();
        finish(std::move(p));
    }
    return r;
}

} // namespace dsa
