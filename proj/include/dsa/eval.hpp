#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/condense.hpp"
#include "dsa/runtime.hpp"

namespace dsa {

/// Training schedule for networks evaluated on a condensed (or coreset) set.
struct EvalConfig {
    ArchSpec arch;
    int epochs = 300;
    double lr = 0.01;
    int decay_epoch = 150; // lr *= decay from this epoch on
    double decay = 0.1;
    int batch = 256;       // effective batch is min(batch, |S|)
    double momentum = 0.9;
    double weight_decay = 5e-4;
    AugDistribution aug = AugDistribution::combination(false);
    int sets = 5;
    int nets = 20;
    std::uint64_t seed = 0;

    void validate() const
    {
        auto fail = [](const std::string& m) { throw ConfigError("eval: " + m); };
        if (sets < 1 || nets < 1) fail("sets and nets must be >= 1");
        if (epochs < 0) fail("epochs must be >= 0");
        if (batch < 1) fail("batch must be positive");
        if (!(lr > 0)) fail("learning rate must be positive");
        if (momentum < 0 || momentum >= 1) fail("momentum must be in [0,1)");
        if (weight_decay < 0) fail("weight decay must be >= 0");
        dsa::validate(arch);
    }
};

/// Fresh kaiming-initialized network trained on (x, y) by minibatch SGD with per-image augmentation.
inline Network<float> train_classifier(const Tensor<float>& x, const std::vector<int>& y, const EvalConfig& cfg,
                                       std::mt19937_64& rng)
{
    const ImageShape& in = cfg.arch.input;
    if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.height || x.dim(3) != in.width)
        throw ShapeError("train_classifier: images " + to_string(x.shape()) + " do not fit " + cfg.arch.name());
    if (static_cast<int>(y.size()) != x.dim(0))
        throw ShapeError("train_classifier: " + std::to_string(y.size()) + " labels for " + std::to_string(x.dim(0))
                         + " images");
    for (int v : y)
        if (v < 0 || v >= cfg.arch.classes)
            throw ShapeError("train_classifier: label " + std::to_string(v) + " outside " + std::to_string(cfg.arch.classes)
                             + " classes");
    Network<float> net(cfg.arch);
    net.kaiming_init(rng);
    Sgd<float> opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    const int batch = std::max(1, std::min(cfg.batch, x.dim(0)));
    for (int e = 0; e < cfg.epochs; ++e) {
        opt.set_lr(e >= cfg.decay_epoch ? cfg.lr * cfg.decay : cfg.lr);
        train_epoch(net, x, y, batch, opt, cfg.aug, rng);
    }
    return net;
}

inline Network<float> train_classifier(const SyntheticSet& s, const EvalConfig& cfg, std::mt19937_64& rng)
{
    return train_classifier(s.images, s.labels, cfg, rng);
}

inline double test_accuracy(Network<float>& net, const Tensor<float>& x, const std::vector<int>& y)
{
    if (y.empty()) throw DataError("empty test split", "test", -1);
    const std::vector<int> p = predict(net, x);
    int hit = 0;
    for (std::size_t i = 0; i < y.size(); ++i) hit += p[i] == y[i];
    return static_cast<double>(hit) / static_cast<double>(y.size());
}

/// Top-1 accuracy over the full test split.
inline double test_accuracy(Network<float>& net, const Dataset& d) { return test_accuracy(net, d.test_x, d.test_y); }

struct EvalReport {
    std::string label;
    std::vector<double> accuracies; // set-major: index = set * nets + net
    int sets = 0, nets = 0;
    double mean = 0, stdev = 0;     // population std over all runs
    std::string config;             // resolved config snapshot
    std::uint64_t seed = 0;
    double seconds = 0;             // wall-clock; kept out of the serialized reports

    void recompute()
    {
        mean = stdev = 0;
        if (accuracies.empty()) return;
        double s = 0;
        for (double a : accuracies) s += a;
        mean = s / static_cast<double>(accuracies.size());
        double v = 0;
        for (double a : accuracies) v += (a - mean) * (a - mean);
        stdev = std::sqrt(v / static_cast<double>(accuracies.size()));
    }

    /// "mean±std" in percent.
    std::string summary() const
    {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2) << 100 * mean << "±" << 100 * stdev;
        return os.str();
    }

    std::string to_text() const
    {
        std::ostringstream os;
        os << "# " << label << "\n# seed " << seed << "\n";
        std::istringstream cfg(config);
        for (std::string line; std::getline(cfg, line);) os << "# " << line << "\n";
        os << "set\tnet\taccuracy\n";
        os << std::setprecision(17);
        for (std::size_t i = 0; i < accuracies.size(); ++i)
            os << i / static_cast<std::size_t>(std::max(nets, 1)) << "\t" << i % static_cast<std::size_t>(std::max(nets, 1))
               << "\t" << accuracies[i] << "\n";
        os << "mean\t" << mean << "\nstd\t" << stdev << "\nruns\t" << accuracies.size() << "\n";
        return os.str();
    }

    nlohmann::json to_json() const
    {
        return {{"label", label}, {"seed", seed},   {"sets", sets}, {"nets", nets},
                {"accuracies", accuracies}, {"mean", mean}, {"std", stdev}, {"config", config}};
    }
};

/// Seed of condensation set s under the protocol.
inline std::uint64_t set_seed(std::uint64_t root, int s) { return derive_seed(root, {100, static_cast<std::uint64_t>(s)}); }

/// Trains cfg.nets networks on each supplied set. Cell (s, n) draws from its own stream, so the
/// result does not depend on `jobs`.
inline EvalReport evaluate_sets(const std::vector<SyntheticSet>& sets, const EvalConfig& cfg, const Dataset& d,
                                int jobs = 1, const std::string& label = "eval")
{
    cfg.validate();
    if (sets.empty()) throw ConfigError("eval: no sets to evaluate");
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport r;
    r.label = label;
    r.sets = static_cast<int>(sets.size());
    r.nets = cfg.nets;
    r.seed = cfg.seed;
    r.accuracies.assign(static_cast<std::size_t>(r.sets * r.nets), 0.0);
    parallel_for(r.sets * r.nets, jobs, [&](int i) {
        const int s = i / r.nets, n = i % r.nets;
        try {
            std::mt19937_64 rng(derive_seed(cfg.seed, {200, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(n)}));
            Network<float> net = train_classifier(sets[static_cast<std::size_t>(s)], cfg, rng);
            r.accuracies[static_cast<std::size_t>(i)] = test_accuracy(net, d);
        } catch (const ShapeError& e) {
            throw ShapeError("set " + std::to_string(s) + " net " + std::to_string(n) + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError("set " + std::to_string(s) + " net " + std::to_string(n) + ": " + e.what());
        }
    });
    r.recompute();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

/// cfg.sets condensations with split seeds; throws DivergenceError naming the failing set.
inline std::vector<SyntheticSet> condense_sets(const CondenseConfig& cc, int sets, const Dataset& d, int jobs = 1)
{
    std::vector<SyntheticSet> out(static_cast<std::size_t>(sets));
    parallel_for(sets, jobs, [&](int s) {
        CondenseConfig c = cc;
        c.seed = set_seed(cc.seed, s);
        CondenseResult res;
        try {
            res = condense(c, d);
        } catch (const ConfigError& e) {
            throw ConfigError("set " + std::to_string(s) + ": " + e.what());
        }
        if (res.diverged) throw DivergenceError("set " + std::to_string(s) + ": " + res.message);
        out[static_cast<std::size_t>(s)] = std::move(res.set);
    });
    return out;
}

/// sets condensations, each used to train nets networks; mean±std over all sets×nets runs.
inline EvalReport evaluate_protocol(const CondenseConfig& cc, const EvalConfig& ec, const Dataset& d, int jobs = 1,
                                    const std::string& label = "protocol")
{
    ec.validate();
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport r = evaluate_sets(condense_sets(cc, ec.sets, d, jobs), ec, d, jobs, label);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

/// Class-stratified uniform sample of ipc real images per class, packaged like a synthetic set.
inline SyntheticSet random_coreset(const Dataset& d, int ipc, std::mt19937_64& rng)
{
    return init_synthetic(d, ipc, InitMode::real, rng);
}

inline EvalReport evaluate_random_coreset(const Dataset& d, int ipc, const EvalConfig& ec, int jobs = 1,
                                          const std::string& label = "random")
{
    ec.validate();
    std::vector<SyntheticSet> sets;
    for (int s = 0; s < ec.sets; ++s) {
        std::mt19937_64 rng(set_seed(ec.seed, s));
        sets.push_back(random_coreset(d, ipc, rng));
    }
    return evaluate_sets(sets, ec, d, jobs, label);
}

struct CrossArchResult {
    std::vector<std::string> rows, cols;
    std::vector<std::vector<EvalReport>> cells; // [row][col]
};

/// Condense on each row architecture, evaluate on each column architecture. A 1×1 grid gives the
/// same numbers as evaluate_protocol.
inline CrossArchResult cross_architecture(const std::vector<ArchSpec>& condense_archs,
                                          const std::vector<ArchSpec>& eval_archs, const CondenseConfig& cc,
                                          const EvalConfig& ec, const Dataset& d, int jobs = 1)
{
    CrossArchResult out;
    for (const auto& a : condense_archs) out.rows.push_back(a.name());
    for (const auto& a : eval_archs) out.cols.push_back(a.name());
    for (std::size_t r = 0; r < condense_archs.size(); ++r) {
        CondenseConfig c = cc;
        c.arch = condense_archs[r];
        std::vector<SyntheticSet> sets;
        try {
            sets = condense_sets(c, ec.sets, d, jobs);
        } catch (const DivergenceError& e) {
            throw DivergenceError("row " + out.rows[r] + ": " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError("row " + out.rows[r] + ": " + e.what());
        }
        std::vector<EvalReport> row;
        for (std::size_t k = 0; k < eval_archs.size(); ++k) {
            EvalConfig e = ec;
            e.arch = eval_archs[k];
            try {
                row.push_back(evaluate_sets(sets, e, d, jobs, out.rows[r] + " -> " + out.cols[k]));
            } catch (const ShapeError& err) {
                throw ShapeError("cell (" + out.rows[r] + ", " + out.cols[k] + "): " + err.what());
            } catch (const ConfigError& err) {
                throw ConfigError("cell (" + out.rows[r] + ", " + out.cols[k] + "): " + err.what());
            }
        }
        out.cells.push_back(std::move(row));
    }
    return out;
}

/// Where augmentation is applied: (condense real, condense synthetic, test-time training).
struct AblationScheme {
    std::string name;
    AugMode real = AugMode::off;
    AugMode syn = AugMode::off;
    bool test = false;
};

/// Ours = (Aω, Aω, A); A = (−, −, −); B = (−, −, A); C = (A, −, A); D = (−, A, A); E = (Aω, Aω, −); F = (A, A, A).
inline AblationScheme ablation_scheme(const std::string& name)
{
    if (name == "Ours" || name == "ours") return {"Ours", AugMode::siamese, AugMode::siamese, true};
    if (name == "A") return {"A", AugMode::off, AugMode::off, false};
    if (name == "B") return {"B", AugMode::off, AugMode::off, true};
    if (name == "C") return {"C", AugMode::independent, AugMode::off, true};
    if (name == "D") return {"D", AugMode::off, AugMode::independent, true};
    if (name == "E") return {"E", AugMode::siamese, AugMode::siamese, false};
    if (name == "F") return {"F", AugMode::independent, AugMode::independent, true};
    throw ConfigError("unknown ablation scheme '" + name + "' (expected Ours, A, B, C, D, E or F)");
}

/// Sets the augmentation placement of both configs; `omega` is the transform family under test.
/// The network update inside condensation is augmented exactly when the synthetic batch is.
inline void apply_scheme(const AblationScheme& s, const AugDistribution& omega, CondenseConfig& cc, EvalConfig& ec)
{
    cc.aug_real = s.real;
    cc.aug_syn = s.syn;
    cc.aug_net = s.syn != AugMode::off;
    const bool cond = s.real != AugMode::off || s.syn != AugMode::off;
    cc.aug = cond ? omega : AugDistribution::none();
    ec.aug = s.test ? omega : AugDistribution::none();
}

} // namespace dsa
