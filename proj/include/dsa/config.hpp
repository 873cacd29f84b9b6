#pragma once

#include <charconv>
#include <fstream>
#include <iomanip>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dsa/nas.hpp"

namespace dsa {

namespace cfgparse {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep = ',')
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep))
        if (!trim(cur).empty()) out.push_back(trim(cur));
    return out;
}

template <typename T>
T number(const std::string& key, const std::string& v)
{
    T out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) throw ConfigError("invalid value '" + v + "' for " + key);
    return out;
}

inline bool boolean(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("invalid boolean '" + v + "' for " + key);
}

template <typename T>
std::string str(T v)
{
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string str(bool v) { return v ? "true" : "false"; }

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
    return out;
}

} // namespace cfgparse

/// "convnet", "mlp" or "lenet", optionally followed by "/key=value" modifiers,
/// e.g. "convnet/depth=2/norm=none". Input shape and classes are filled in later.
inline ArchSpec parse_arch(const std::string& text, const ArchSpec& base)
{
    const auto parts = cfgparse::split(text, '/');
    if (parts.empty()) throw ConfigError("empty architecture descriptor");
    ArchSpec s;
    const Family f = parse_family(parts[0]);
    if (f == Family::convnet) s = ArchSpec::convnet(base.input, base.classes);
    else if (f == Family::mlp) s = ArchSpec::mlp(base.input, base.classes);
    else s = ArchSpec::lenet(base.input, base.classes);
    std::map<std::string, std::string> kv;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos) throw ConfigError("architecture modifier '" + parts[i] + "' is not key=value");
        kv[parts[i].substr(0, eq)] = parts[i].substr(eq + 1);
    }
    s.apply_kv(kv);
    return s;
}

inline std::string arch_descriptor(const ArchSpec& s)
{
    std::string out = name_of(s.family);
    if (s.family == Family::lenet) return out + "/activation=" + name_of(s.activation);
    out += "/width=" + std::to_string(s.width) + "/activation=" + name_of(s.activation);
    if (s.family == Family::convnet)
        out += "/depth=" + std::to_string(s.depth) + "/norm=" + name_of(s.norm) + "/pooling=" + name_of(s.pooling);
    return out;
}

struct NasSettings {
    std::string grid = "desk"; // desk | full
    std::vector<int> depths, widths;
    std::vector<Activation> activations;
    std::vector<Norm> norms;
    std::vector<Pooling> poolings;
    int ipc = 10;
    int reference_epochs = 20;
    int reference_batch = 256;
    int proxy_epochs = 300;
    int proxy_batch = 100;
    int condense_outer = 20;
    double top_frac = 0.05;
    bool random = true, dsa = true, early_stop = true;

    NasAxes axes() const
    {
        NasAxes a = grid == "full" ? NasAxes::full() : NasAxes::desk();
        if (!depths.empty()) a.depths = depths;
        if (!widths.empty()) a.widths = widths;
        if (!activations.empty()) a.activations = activations;
        if (!norms.empty()) a.norms = norms;
        if (!poolings.empty()) a.poolings = poolings;
        return a;
    }
};

/// Everything one CLI invocation needs. Plain-text sections of key = value lines.
struct ExperimentConfig {
    // [run]
    std::uint64_t seed = 0;
    std::string output = "runs/out";
    int jobs = 1;
    // [dataset]
    std::string dataset = "mnist";
    std::string data_root; // empty: DSA_DATA_ROOT, then ./data
    // [arch] + [aug]
    ArchSpec arch = ArchSpec::convnet(ImageShape{}, 10);
    std::string aug_strategy = "combination";
    std::string no_flip = "auto"; // auto: drop flip on digit datasets
    AugRanges ranges;
    // [condense]
    CondenseConfig condense;
    bool ipc_defaults = true; // overwrite inner / net_steps from the ipc table
    // [eval]
    EvalConfig eval;
    std::string eval_arch;   // empty: same as [arch]
    std::string eval_aug = "same"; // same | none
    // [crossarch]
    std::vector<std::string> cross_condense{"convnet", "mlp", "lenet"};
    std::vector<std::string> cross_evaluate{"convnet", "mlp", "lenet"};
    // [nas]
    NasSettings nas;

    struct Field {
        std::string section, key;
        std::function<std::string()> get;
        std::function<void(const std::string&)> set;
    };

    std::vector<Field> fields()
    {
        using namespace cfgparse;
        std::vector<Field> f;
        auto add = [&](const char* sec, const char* key, std::function<std::string()> g, std::function<void(const std::string&)> s) {
            f.push_back({sec, key, std::move(g), std::move(s)});
        };
        auto full = [](const char* sec, const char* key) { return std::string(sec) + "." + key; };
        auto i32 = [&](const char* sec, const char* key, int& r) {
            add(sec, key, [&r] { return str(r); }, [&r, k = full(sec, key)](const std::string& v) { r = number<int>(k, v); });
        };
        auto f64 = [&](const char* sec, const char* key, double& r) {
            add(sec, key, [&r] { return str(r); }, [&r, k = full(sec, key)](const std::string& v) { r = number<double>(k, v); });
        };
        auto flag = [&](const char* sec, const char* key, bool& r) {
            add(sec, key, [&r] { return str(r); }, [&r, k = full(sec, key)](const std::string& v) { r = boolean(k, v); });
        };
        auto text = [&](const char* sec, const char* key, std::string& r) {
            add(sec, key, [&r] { return r; }, [&r](const std::string& v) { r = v; });
        };
        auto words = [&](const char* sec, const char* key, std::vector<std::string>& r) {
            add(sec, key, [&r] { return join(r, [](const std::string& s) { return s; }); }, [&r](const std::string& v) { r = split(v); });
        };
        auto ints = [&](const char* sec, const char* key, std::vector<int>& r) {
            add(sec, key, [&r] { return join(r, [](int x) { return std::to_string(x); }); },
                [&r, k = full(sec, key)](const std::string& v) {
                    r.clear();
                    for (const auto& s : split(v)) r.push_back(number<int>(k, s));
                });
        };
        auto enums = [&]<typename E>(const char* sec, const char* key, std::vector<E>& r, E (*parse)(const std::string&)) {
            add(sec, key, [&r] { return join(r, [](E e) { return std::string(name_of(e)); }); },
                [&r, parse](const std::string& v) {
                    r.clear();
                    for (const auto& s : split(v)) r.push_back(parse(s));
                });
        };

        add("run", "seed", [this] { return str(seed); }, [this](const std::string& v) { seed = number<std::uint64_t>("run.seed", v); });
        text("run", "output", output);
        i32("run", "jobs", jobs);

        text("dataset", "name", dataset);
        text("dataset", "root", data_root);

        add("arch", "family", [this] { return std::string(name_of(arch.family)); }, [this](const std::string& v) { arch.family = parse_family(v); });
        i32("arch", "depth", arch.depth);
        i32("arch", "width", arch.width);
        add("arch", "activation", [this] { return std::string(name_of(arch.activation)); },
            [this](const std::string& v) { arch.activation = parse_activation(v); });
        add("arch", "norm", [this] { return std::string(name_of(arch.norm)); }, [this](const std::string& v) { arch.norm = parse_norm(v); });
        add("arch", "pooling", [this] { return std::string(name_of(arch.pooling)); },
            [this](const std::string& v) { arch.pooling = parse_pooling(v); });

        text("aug", "strategy", aug_strategy);
        text("aug", "no_flip", no_flip);
        f64("aug", "crop_frac", ranges.crop_frac);
        f64("aug", "cutout_frac", ranges.cutout_frac);
        f64("aug", "scale_max", ranges.scale_max);
        f64("aug", "rotate_deg", ranges.rotate_deg);
        f64("aug", "brightness_amp", ranges.brightness_amp);
        f64("aug", "brightness_lo", ranges.brightness_lo);
        f64("aug", "brightness_hi", ranges.brightness_hi);
        f64("aug", "saturation_lo", ranges.saturation_lo);
        f64("aug", "saturation_hi", ranges.saturation_hi);
        f64("aug", "contrast_lo", ranges.contrast_lo);
        f64("aug", "contrast_hi", ranges.contrast_hi);

        CondenseConfig& c = condense;
        i32("condense", "outer", c.outer);
        i32("condense", "inner", c.inner);
        i32("condense", "syn_steps", c.syn_steps);
        i32("condense", "net_steps", c.net_steps);
        f64("condense", "lr_syn", c.lr_syn);
        f64("condense", "lr_net", c.lr_net);
        f64("condense", "momentum_syn", c.momentum_syn);
        f64("condense", "momentum_net", c.momentum_net);
        i32("condense", "ipc", c.ipc);
        flag("condense", "ipc_defaults", ipc_defaults);
        i32("condense", "batch_real", c.batch_real);
        i32("condense", "batch_syn", c.batch_syn);
        i32("condense", "batch_net", c.batch_net);
        add("condense", "aug_real", [&c] { return std::string(name_of(c.aug_real)); }, [&c](const std::string& v) { c.aug_real = parse_aug_mode(v); });
        add("condense", "aug_syn", [&c] { return std::string(name_of(c.aug_syn)); }, [&c](const std::string& v) { c.aug_syn = parse_aug_mode(v); });
        flag("condense", "aug_net", c.aug_net);
        i32("condense", "omegas", c.omegas);
        flag("condense", "resample_real", c.resample_real);
        flag("condense", "include_affine", c.include_affine);
        add("condense", "init", [&c] { return std::string(name_of(c.init)); }, [&c](const std::string& v) { c.init = parse_init_mode(v); });
        f64("condense", "abort_loss", c.abort_loss);
        ints("condense", "diag_iterations", c.diag_iterations);

        EvalConfig& e = eval;
        text("eval", "arch", eval_arch);
        text("eval", "aug", eval_aug);
        i32("eval", "epochs", e.epochs);
        f64("eval", "lr", e.lr);
        i32("eval", "decay_epoch", e.decay_epoch);
        f64("eval", "decay", e.decay);
        i32("eval", "batch", e.batch);
        f64("eval", "momentum", e.momentum);
        f64("eval", "weight_decay", e.weight_decay);
        i32("eval", "sets", e.sets);
        i32("eval", "nets", e.nets);

        words("crossarch", "condense", cross_condense);
        words("crossarch", "evaluate", cross_evaluate);

        text("nas", "grid", nas.grid);
        ints("nas", "depths", nas.depths);
        ints("nas", "widths", nas.widths);
        enums("nas", "activations", nas.activations, &parse_activation);
        enums("nas", "norms", nas.norms, &parse_norm);
        enums("nas", "poolings", nas.poolings, &parse_pooling);
        i32("nas", "ipc", nas.ipc);
        i32("nas", "reference_epochs", nas.reference_epochs);
        i32("nas", "reference_batch", nas.reference_batch);
        i32("nas", "proxy_epochs", nas.proxy_epochs);
        i32("nas", "proxy_batch", nas.proxy_batch);
        i32("nas", "condense_outer", nas.condense_outer);
        f64("nas", "top_frac", nas.top_frac);
        flag("nas", "random", nas.random);
        flag("nas", "dsa", nas.dsa);
        flag("nas", "early_stop", nas.early_stop);
        return f;
    }

    /// Sets "section.key" to value; unknown keys are a ConfigError.
    void set(const std::string& dotted, const std::string& value)
    {
        const auto dot = dotted.find('.');
        if (dot == std::string::npos) throw ConfigError("override '" + dotted + "' must be section.key");
        const std::string sec = dotted.substr(0, dot), key = dotted.substr(dot + 1);
        for (auto& f : fields())
            if (f.section == sec && f.key == key) {
                f.set(cfgparse::trim(value));
                return;
            }
        throw ConfigError("unknown config key '" + dotted + "'");
    }

    /// Parses section headers and key = value lines; '#' and ';' start comments.
    void parse(std::istream& in, const std::string& origin = "config")
    {
        std::string section, line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find_first_of("#;");
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = cfgparse::trim(line);
            if (line.empty()) continue;
            const std::string where = origin + ":" + std::to_string(lineno) + ": ";
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
                section = cfgparse::trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
            if (section.empty()) throw ConfigError(where + "key outside of any section");
            try {
                set(section + "." + cfgparse::trim(line.substr(0, eq)), line.substr(eq + 1));
            } catch (const ConfigError& e) {
                throw ConfigError(where + e.what());
            }
        }
    }

    void load(const std::string& path)
    {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        parse(in, path);
    }

    /// Every key with its current value, grouped by section.
    std::string to_ini()
    {
        std::ostringstream os;
        std::string sec;
        for (auto& f : fields()) {
            if (f.section != sec) {
                os << (sec.empty() ? "" : "\n") << "[" << f.section << "]\n";
                sec = f.section;
            }
            os << f.key << " = " << f.get() << "\n";
        }
        return os.str();
    }

    /// The augmentation distribution for a dataset.
    AugDistribution aug_for(const Dataset& d) const
    {
        bool digits = d.digits;
        if (no_flip == "true") digits = true;
        else if (no_flip == "false") digits = false;
        else if (no_flip != "auto") throw ConfigError("aug.no_flip must be auto, true or false");
        AugDistribution a = AugDistribution::parse(aug_strategy, digits);
        a.ranges = ranges;
        return a;
    }

    /// Fills dataset-dependent fields and returns ready-to-run condensation and evaluation configs.
    std::pair<CondenseConfig, EvalConfig> resolve(const Dataset& d) const
    {
        ArchSpec a = arch;
        a.input = d.shape();
        a.classes = d.classes;
        dsa::validate(a);
        CondenseConfig c = condense;
        c.arch = a;
        c.aug = aug_for(d);
        if (c.aug.strategy == Strategy::none) c.aug_real = c.aug_syn = AugMode::off, c.aug_net = false;
        c.seed = seed;
        if (ipc_defaults) c.apply_ipc_defaults();
        EvalConfig e = eval;
        e.arch = eval_arch.empty() ? a : parse_arch(eval_arch, a);
        if (eval_aug == "same") e.aug = c.aug;
        else if (eval_aug == "none") e.aug = AugDistribution::none();
        else throw ConfigError("eval.aug must be same or none");
        e.seed = seed;
        c.validate();
        e.validate();
        return {c, e};
    }

    std::vector<ArchSpec> arch_list(const std::vector<std::string>& names, const Dataset& d) const
    {
        ArchSpec base = arch;
        base.input = d.shape();
        base.classes = d.classes;
        std::vector<ArchSpec> out;
        for (const auto& n : names) out.push_back(parse_arch(n, base));
        return out;
    }

    StudyConfig study_config(const Dataset& d) const
    {
        auto [c, e] = resolve(d);
        StudyConfig s;
        s.reference = e;
        s.reference.epochs = nas.reference_epochs;
        s.reference.decay_epoch = nas.reference_epochs / 2;
        s.reference.batch = nas.reference_batch;
        s.reference.aug = AugDistribution::none();
        s.proxy = e;
        s.proxy.epochs = nas.proxy_epochs;
        s.proxy.decay_epoch = nas.proxy_epochs / 2;
        s.proxy.batch = nas.proxy_batch;
        s.condense = c;
        s.condense.ipc = nas.ipc;
        s.condense.outer = nas.condense_outer;
        if (ipc_defaults) s.condense.apply_ipc_defaults();
        s.ipc = nas.ipc;
        s.top_frac = nas.top_frac;
        s.random = nas.random;
        s.dsa = nas.dsa;
        s.early_stop = nas.early_stop;
        return s;
    }

    /// The config as actually run on `d`: ipc-dependent schedule written out and switched off.
    std::string resolved_ini(const Dataset& d) const
    {
        ExperimentConfig r = *this;
        const auto [c, e] = resolve(d);
        r.condense.inner = c.inner;
        r.condense.net_steps = c.net_steps;
        r.ipc_defaults = false;
        return r.to_ini();
    }
};

} // namespace dsa
