// Command-line front end: condense, eval, ablate, crossarch, nas, export, diagnose.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dsa/config.hpp"

namespace fs = std::filesystem;
using namespace dsa;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, data_error = 3, divergence = 4 };

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    int jobs = 0;
};

ExperimentConfig load_config(const Common& c)
{
    ExperimentConfig cfg;
    if (!c.config.empty()) cfg.load(c.config);
    for (const auto& o : c.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (c.jobs > 0) cfg.jobs = c.jobs;
    return cfg;
}

Dataset load_data(const ExperimentConfig& cfg)
{
    const fs::path root = data_root(cfg.data_root);
    std::fprintf(stderr, "loading %s from %s\n", cfg.dataset.c_str(), root.string().c_str());
    return load_dataset(cfg.dataset, root);
}

fs::path out_dir(const ExperimentConfig& cfg)
{
    fs::path p(cfg.output);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& s)
{
    detail::write_atomically(p, reinterpret_cast<const unsigned char*>(s.data()), s.size());
    std::fprintf(stderr, "wrote %s\n", p.string().c_str());
}

std::string commented(const std::string& text)
{
    std::ostringstream os;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) os << "# " << line << "\n";
    return os.str();
}

std::string trace_text(const SyntheticSet& s, const std::string& header)
{
    std::ostringstream os;
    os << header << commented(s.config) << "k\tloss\n" << std::setprecision(17);
    for (std::size_t k = 0; k < s.loss_trace.size(); ++k) os << k << "\t" << s.loss_trace[k] << "\n";
    return os.str();
}

CondenseObserver progress(int outer)
{
    return [outer](int k, const SyntheticSet& s) {
        if (k % 10 == 0 || k + 1 == outer) std::fprintf(stderr, "k=%d/%d loss=%.4f\n", k + 1, outer, s.loss_trace.back());
        return true;
    };
}

int cmd_condense(const Common& c)
{
    ExperimentConfig cfg = load_config(c);
    const Dataset d = load_data(cfg);
    auto [cc, ec] = cfg.resolve(d);
    const fs::path out = out_dir(cfg);
    const std::string resolved = cfg.resolved_ini(d);
    write_text(out / "config.ini", resolved);
    CondenseResult r = condense(cc, d, progress(cc.outer));
    r.set.config = resolved;
    if (r.diverged) {
        write_text(out / "loss_trace.partial.txt", trace_text(r.set, "# PARTIAL: diverged: " + r.message + "\n"));
        try {
            save_synthetic(out / "synthetic.partial.dsa", r.set);
        } catch (const DataError&) {
            std::fprintf(stderr, "partial set has non-finite pixels; not saved\n");
        }
        throw DivergenceError(r.message);
    }
    save_synthetic(out / "synthetic.dsa", r.set);
    write_text(out / "loss_trace.txt", trace_text(r.set, ""));
    export_grid(r.set, out / "grid.png");
    std::printf("condensed %d images in %.1fs, final loss %.4f\n", r.set.images.dim(0), r.seconds,
                r.set.loss_trace.empty() ? 0.0 : r.set.loss_trace.back());
    return ok;
}

void write_report(const fs::path& out, const std::string& stem, const EvalReport& r)
{
    write_text(out / (stem + ".txt"), r.to_text());
    write_text(out / (stem + ".json"), r.to_json().dump(2) + "\n");
}

int cmd_eval(const Common& c, const std::string& set_path, bool random)
{
    ExperimentConfig cfg = load_config(c);
    const Dataset d = load_data(cfg);
    auto [cc, ec] = cfg.resolve(d);
    const fs::path out = out_dir(cfg);
    EvalReport r;
    if (!set_path.empty()) {
        std::vector<SyntheticSet> sets{load_synthetic(set_path)};
        r = evaluate_sets(sets, ec, d, cfg.jobs, "eval " + fs::path(set_path).filename().string());
    } else if (random) {
        r = evaluate_random_coreset(d, cc.ipc, ec, cfg.jobs, "random coreset ipc=" + std::to_string(cc.ipc));
    } else {
        r = evaluate_protocol(cc, ec, d, cfg.jobs, "protocol");
    }
    r.config = cfg.resolved_ini(d);
    write_report(out, "eval_report", r);
    std::printf("%s: %s%% over %zu runs (%.1fs)\n", r.label.c_str(), r.summary().c_str(), r.accuracies.size(), r.seconds);
    return ok;
}

int cmd_ablate(const Common& c, const std::string& scheme_name)
{
    ExperimentConfig cfg = load_config(c);
    const AblationScheme scheme = ablation_scheme(scheme_name);
    const Dataset d = load_data(cfg);
    auto [cc, ec] = cfg.resolve(d);
    const AugDistribution omega = cfg.aug_for(d);
    if (omega.strategy == Strategy::none && scheme.name != "A")
        throw ConfigError("ablate: scheme " + scheme.name + " needs aug.strategy other than none");
    apply_scheme(scheme, omega, cc, ec);
    const fs::path out = out_dir(cfg);
    EvalReport r = evaluate_protocol(cc, ec, d, cfg.jobs, "ablation " + scheme.name);
    r.config = cfg.resolved_ini(d) + "\n[ablation]\nscheme = " + scheme.name + "\n";
    write_report(out, "ablation_" + scheme.name, r);
    std::ostringstream row;
    row << commented(r.config) << "scheme\tcondense_real\tcondense_syn\ttest\taccuracy\n"
        << scheme.name << "\t" << name_of(scheme.real) << "\t" << name_of(scheme.syn) << "\t" << (scheme.test ? "on" : "off")
        << "\t" << r.summary() << "\n";
    write_text(out / ("ablation_" + scheme.name + "_row.txt"), row.str());
    std::printf("%s", row.str().substr(row.str().rfind("scheme\t")).c_str());
    return ok;
}

int cmd_crossarch(const Common& c)
{
    ExperimentConfig cfg = load_config(c);
    const Dataset d = load_data(cfg);
    auto [cc, ec] = cfg.resolve(d);
    const auto rows = cfg.arch_list(cfg.cross_condense, d), cols = cfg.arch_list(cfg.cross_evaluate, d);
    const fs::path out = out_dir(cfg);
    const CrossArchResult m = cross_architecture(rows, cols, cc, ec, d, cfg.jobs);
    const std::string resolved = cfg.resolved_ini(d);
    std::ostringstream os;
    os << commented(resolved) << "C\\T";
    for (const auto& col : m.cols) os << "\t" << col;
    os << "\n";
    nlohmann::json j;
    j["config"] = resolved;
    j["rows"] = m.rows;
    j["cols"] = m.cols;
    j["cells"] = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
        os << m.rows[r];
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < m.cols.size(); ++k) {
            os << "\t" << m.cells[r][k].summary();
            EvalReport e = m.cells[r][k];
            e.config = resolved;
            row.push_back(e.to_json());
        }
        os << "\n";
        j["cells"].push_back(row);
    }
    write_text(out / "crossarch.txt", os.str());
    write_text(out / "crossarch.json", j.dump(2) + "\n");
    std::printf("%s", os.str().substr(os.str().find("C\\T")).c_str());
    return ok;
}

int cmd_nas(const Common& c, const std::string& dsa_set)
{
    ExperimentConfig cfg = load_config(c);
    const Dataset d = load_data(cfg);
    const NasGrid grid = enumerate(cfg.nas.axes(), d.shape(), d.classes);
    std::fprintf(stderr, "nas grid: %zu architectures\n", grid.size());
    const StudyConfig sc = cfg.study_config(d);
    std::optional<SyntheticSet> pre;
    if (!dsa_set.empty()) pre = load_synthetic(dsa_set);
    RankStudy st = study(grid, d, sc, cfg.jobs, pre ? &*pre : nullptr);
    st.config = cfg.resolved_ini(d);
    const fs::path out = out_dir(cfg);
    write_text(out / "nas_study.txt", st.to_text());
    write_text(out / "nas_study.json", st.to_json().dump(2) + "\n");
    for (const auto& p : st.proxies) write_text(out / ("scatter_" + p.name + ".txt"), commented(st.config) + st.scatter(p));
    std::printf("%s", st.to_text().substr(st.to_text().find("proxy\t")).c_str());
    return ok;
}

int cmd_export(const std::string& set_path, const std::string& image, bool raw)
{
    const SyntheticSet s = load_synthetic(set_path);
    const GridImage g = export_grid(s, image, !raw);
    std::printf("wrote %s (%dx%d)\n", image.c_str(), g.width, g.height);
    return ok;
}

int cmd_diagnose(const Common& c)
{
    ExperimentConfig cfg = load_config(c);
    const Dataset d = load_data(cfg);
    auto [cc, ec] = cfg.resolve(d);
    const int last = cc.outer - 1;
    if (last < 0) throw ConfigError("diagnose: condense.outer must be >= 1");
    if (cc.diag_iterations.empty()) cc.diag_iterations = {last};
    if (std::find(cc.diag_iterations.begin(), cc.diag_iterations.end(), last) == cc.diag_iterations.end())
        cc.diag_iterations.push_back(last);
    CondenseConfig on = cc, off = cc;
    if (on.aug.strategy == Strategy::none) throw ConfigError("diagnose: aug.strategy must not be none");
    off.aug = AugDistribution::none();
    off.aug_real = off.aug_syn = AugMode::off;
    off.aug_net = false;

    const std::string resolved = cfg.resolved_ini(d);
    nlohmann::json j;
    j["config"] = resolved;
    std::ostringstream os;
    os << commented(resolved);
    for (const auto& [name, conf] : {std::pair<std::string, CondenseConfig>{"dsa_off", off}, {"dsa_on", on}}) {
        std::fprintf(stderr, "%s\n", name.c_str());
        const CondenseResult r = condense(conf, d, progress(conf.outer));
        if (r.diverged) throw DivergenceError(name + ": " + r.message);
        nlohmann::json runs = nlohmann::json::array();
        for (int k : conf.diag_iterations) {
            std::vector<double> syn = r.diagnostics.syn_norms(k), real = r.diagnostics.real_norms(k);
            std::vector<double> ls;
            for (double v : syn) ls.push_back(std::log10(std::max(v, 1e-12)));
            const auto h = histogram(ls, 20, -6.0, 2.0);
            runs.push_back({{"k", k}, {"syn_norms", syn}, {"real_norms", real}, {"median_syn", median(syn)},
                            {"median_real", median(real)}, {"log10_histogram", h}, {"histogram_range", {-6.0, 2.0}}});
            os << name << "\tk=" << k << "\tmedian_syn=" << median(syn) << "\tmedian_real=" << median(real) << "\thist_log10[-6,2]=";
            for (std::size_t b = 0; b < h.size(); ++b) os << (b ? "," : "") << h[b];
            os << "\n";
        }
        j[name] = runs;
    }
    const fs::path out = out_dir(cfg);
    write_text(out / "diagnose.txt", os.str());
    write_text(out / "diagnose.json", j.dump(2) + "\n");
    std::printf("%s", os.str().substr(os.str().find("dsa_off\t")).c_str());
    return ok;
}

} // namespace

int main(int argc, char** argv)
{
    tune_allocator();
    CLI::App app{"Dataset condensation with differentiable Siamese augmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("-j,--jobs", common.jobs, "parallel grid cells (overrides run.jobs)");

    auto with_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config, "config file (sections of key = value)");
        sub->add_option("overrides", common.overrides, "section.key=value overrides");
    };
    auto* condense_cmd = app.add_subcommand("condense", "learn a synthetic set");
    with_config(condense_cmd);

    std::string set_path;
    bool random = false;
    auto* eval_cmd = app.add_subcommand("eval", "train networks on condensed sets and report test accuracy");
    eval_cmd->add_option("--set", set_path, "evaluate a saved set instead of condensing");
    eval_cmd->add_flag("--random", random, "evaluate random real coresets of condense.ipc images per class");
    with_config(eval_cmd);

    std::string scheme;
    auto* ablate_cmd = app.add_subcommand("ablate", "augmentation placement ablation (Ours, A-F)");
    ablate_cmd->add_option("scheme", scheme, "Ours, A, B, C, D, E or F")->required();
    with_config(ablate_cmd);

    auto* cross_cmd = app.add_subcommand("crossarch", "condense on one architecture, evaluate on another");
    with_config(cross_cmd);

    std::string dsa_set;
    auto* nas_cmd = app.add_subcommand("nas", "rank a ConvNet grid on proxy sets");
    nas_cmd->add_option("--dsa-set", dsa_set, "use a saved set as the DSA proxy");
    with_config(nas_cmd);

    std::string export_set, export_image;
    bool raw = false;
    auto* export_cmd = app.add_subcommand("export", "write a saved set as an image grid");
    export_cmd->add_option("set", export_set)->required();
    export_cmd->add_option("image", export_image, ".png, .ppm or .pgm")->required();
    export_cmd->add_flag("--raw", raw, "skip denormalization");

    auto* diag_cmd = app.add_subcommand("diagnose", "synthetic-gradient magnitudes with augmentation off and on");
    with_config(diag_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        if (*condense_cmd) return cmd_condense(common);
        if (*eval_cmd) return cmd_eval(common, set_path, random);
        if (*ablate_cmd) return cmd_ablate(common, scheme);
        if (*cross_cmd) return cmd_crossarch(common);
        if (*nas_cmd) return cmd_nas(common, dsa_set);
        if (*export_cmd) return cmd_export(export_set, export_image, raw);
        if (*diag_cmd) return cmd_diagnose(common);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return config_error;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return data_error;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return divergence;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return failure;
    }
    return failure;
}
