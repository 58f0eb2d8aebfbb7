// flowtame: generate toy data, train a flow, tame it, evaluate, sample.
//
// Every subcommand accepts --config FILE (key = value lines under a
// [command] section, CLI11's TOML subset); flags given on the command line
// win over the file. The resolved options are echoed in the same format to
// config.toml in the run directory. Run directories
// default to $FLOWTAME_OUT_ROOT/<command> (or runs/<command>).
//
// Exit codes: 0 ok, 2 usage/config error, 3 taming threshold not reached,
// 4 runtime or data error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowtame/flowtame.hpp"

namespace fs = std::filesystem;
using namespace flowtame;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNotReached = 3;
constexpr int kExitRuntime = 4;

fs::path run_dir(const std::string& flag, const char* command) {
    if (!flag.empty()) return flag;
    const char* root = std::getenv("FLOWTAME_OUT_ROOT");
    return fs::path(root != nullptr && *root != '\0' ? root : "runs") / command;
}

void echo_config(const CLI::App& sub, const fs::path& path) {
    write_text(path, "[" + sub.get_name() + "]\n" + sub.config_to_str(true, false));
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string join(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.4f", v[i]);
    return s;
}

// ------------------------------------------------------------ split flags

struct SplitArgs {
    std::vector<int> forget_labels;
    std::vector<std::size_t> forget_indices;
    std::size_t forget_limit = 0;
    std::string remember_file;
};

void add_split_options(CLI::App* sub, SplitArgs& a) {
    sub->add_option("--forget-label", a.forget_labels, "Component label(s) to forget")->delimiter(',');
    sub->add_option("--forget-indices", a.forget_indices, "Row indices to forget")->delimiter(',');
    sub->add_option("--forget-limit", a.forget_limit,
                    "Keep only the first N matching rows in the forget set; the rest become holdout");
    sub->add_option("--remember-file", a.remember_file, "Dataset file used as the remember set");
}

struct Loaded {
    LabeledDataset data;
    std::optional<LabeledDataset> remember_source;
    Split split;
};

Loaded load_split(const std::string& data_path, const SplitArgs& a) {
    Loaded out;
    out.data = load_dataset(data_path);
    SplitSpec spec;
    spec.forget_labels = a.forget_labels;
    spec.forget_indices = a.forget_indices;
    spec.forget_limit = a.forget_limit;
    if (a.forget_labels.empty() && a.forget_indices.empty())
        throw ConfigError("give --forget-label or --forget-indices");
    if (!a.forget_labels.empty() && !a.forget_indices.empty())
        throw ConfigError("--forget-label and --forget-indices are exclusive");
    if (!a.remember_file.empty()) {
        out.remember_source = load_dataset(a.remember_file);
        spec.mode = SplitMode::external_file;
        spec.remember_source = &*out.remember_source;
    } else {
        spec.mode = a.forget_indices.empty() ? SplitMode::by_label : SplitMode::by_index;
    }
    out.split = split(out.data, spec);
    return out;
}

// Named evaluation sets: forget, remember, holdout (if any), training data.
std::vector<std::pair<std::string, Batch>> eval_sets(const Loaded& l) {
    std::vector<std::pair<std::string, Batch>> sets{{"forget", l.split.forget}, {"remember", l.split.remember}};
    if (l.split.holdout.rows() > 0) sets.emplace_back("holdout", l.split.holdout);
    if (!l.split.remember_is_training) sets.emplace_back("training", l.data.points);
    return sets;
}

QuantileReport build_report(const FlowModel& base, const FlowModel& tamed, const Loaded& l, double delta,
                            double epsilon, bool met) {
    QuantileReport r;
    r.delta = delta;
    r.epsilon = epsilon;
    r.threshold_met = met;
    r.base_remember = remember_stats(base, l.split.remember);
    r.tamed_remember = remember_stats(tamed, l.split.remember);
    for (const auto& [name, set] : eval_sets(l)) {
        const double qb = likelihood_quantile(base, set, r.base_remember);
        const double qt = likelihood_quantile(tamed, set, r.tamed_remember);
        r.entries.push_back({name, qb, qt, qb - qt});
    }
    return r;
}

// ------------------------------------------------------------ gen

struct GenArgs {
    std::string preset = "five-gaussians";
    std::uint64_t seed = 7;
    std::string output;
};

int run_gen(const CLI::App& sub, const GenArgs& a) {
    const LabeledDataset ds = generate_preset(a.preset, a.seed);
    save_dataset(ds, a.output);
    echo_config(sub, a.output + ".config.toml");
    std::printf("wrote %s: n=%lld components=%d seed=%llu\n", a.output.c_str(), static_cast<long long>(ds.size()),
                ds.n_components(), static_cast<unsigned long long>(a.seed));
    return kExitOk;
}

// ------------------------------------------------------------ train

struct TrainArgs {
    std::string data;
    std::string out;
    int layers = 8;
    int hidden = 32;
    double clamp = 3.0;
    std::string optimizer = "adam";
    TrainConfig cfg;
};

int run_train(const CLI::App& sub, TrainArgs& a) {
    a.cfg.optimizer = parse_optimizer(a.optimizer);
    const LabeledDataset ds = load_dataset(a.data);
    const FlowModel model = init_model(ds.dim(), a.layers, a.hidden, a.cfg.seed, a.clamp);
    const TrainResult r = train(model, ds.points, a.cfg);

    const fs::path dir = run_dir(a.out, "train");
    save_checkpoint(r.model, dir / "model.json");
    curve_csv(r.curve).save(dir / "curve.csv");
    curve_csv(r.eval_curve).save(dir / "eval_curve.csv");
    echo_config(sub, dir / "config.toml");
    if (!r.eval_curve.empty())
        std::printf("nll %.4f -> %.4f over %d iterations; wrote %s\n", r.eval_curve.front().nll,
                    r.eval_curve.back().nll, a.cfg.iterations, (dir / "model.json").c_str());
    else
        std::printf("0 iterations; wrote %s\n", (dir / "model.json").c_str());
    return kExitOk;
}

// ------------------------------------------------------------ tame

struct TameArgs {
    std::string base;
    std::string data;
    std::string out;
    std::string optimizer = "adam";
    int checkpoint_every = 0;
    bool no_remember = false;
    bool no_kl_forward = false;
    bool no_kl_reverse = false;
    bool no_nll_anchor = false;
    SplitArgs split;
    TamingConfig cfg;
};

int run_tame(const CLI::App& sub, TameArgs& a) {
    a.cfg.optimizer = parse_optimizer(a.optimizer);
    a.cfg.flags.use_remember_loss = !a.no_remember;
    a.cfg.flags.use_forward_kl = !a.no_kl_forward;
    a.cfg.flags.use_reverse_kl = !a.no_kl_reverse;
    a.cfg.flags.use_nll_anchor = !a.no_nll_anchor;
    a.cfg.validate();

    const FlowModel base = load_checkpoint(a.base);
    const Loaded l = load_split(a.data, a.split);
    const fs::path dir = run_dir(a.out, "tame");
    echo_config(sub, dir / "config.toml");

    TamingObserver obs;
    if (a.checkpoint_every > 0) {
        obs.every = a.checkpoint_every;
        obs.callback = [&](int it, const FlowModel& m) {
            char name[32];
            std::snprintf(name, sizeof name, "iter_%06d.json", it);
            save_checkpoint(m, dir / "checkpoints" / name);
        };
    }
    const TamingResult r = tame(base, l.split.forget, l.split.remember, a.cfg, obs);

    save_checkpoint(r.model, dir / "tamed.json");
    trace_csv(r.trace).save(dir / "trace.csv");
    const QuantileReport report = build_report(base, r.model, l, a.cfg.delta, a.cfg.epsilon, r.converged());
    quantile_report_csv(report).save(dir / "quantiles.csv");
    nlohmann::json j = to_json(report);
    j["iterations"] = r.iterations;
    j["status"] = r.converged() ? "threshold_met" : "max_iterations";
    j["exit_stats"] = {{"mu", r.exit_stats.mu}, {"sigma", r.exit_stats.sigma}};
    j["exit_max_abs_dist"] = r.exit_dists.size() ? r.exit_dists.cwiseAbs().maxCoeff() : 0.0;
    j["forget_size"] = l.split.forget.rows();
    j["remember_size"] = l.split.remember.rows();
    j["remember_is_training"] = l.split.remember_is_training;
    write_text(dir / "report.json", j.dump(2) + "\n");

    std::printf("%s after %d iterations (max |dist| %.3f); wrote %s\n",
                r.converged() ? "threshold met" : "threshold NOT met", r.iterations,
                r.exit_dists.cwiseAbs().maxCoeff(), (dir / "tamed.json").c_str());
    return r.converged() ? kExitOk : kExitNotReached;
}

// ------------------------------------------------------------ eval

struct EvalArgs {
    std::string base;
    std::string tamed;
    std::string data;
    std::string out;
    double delta = 4.0;
    double epsilon = 0.6;
    int bins = 40;
    int samples = 10000;
    std::uint64_t seed = 1;
    SplitArgs split;
};

nlohmann::json ks_json(const Eigen::VectorXd& nlls) {
    const KsResult k = ks_normality_test(nlls);
    return {{"statistic", k.statistic}, {"p_value", k.p_value}, {"n", k.n}};
}

int run_eval(const CLI::App& sub, const EvalArgs& a) {
    if (a.bins <= 0) throw ConfigError("--bins must be positive");
    if (a.samples < 0) throw ConfigError("--samples must be >= 0");
    const FlowModel base = load_checkpoint(a.base);
    const FlowModel tamed = load_checkpoint(a.tamed.empty() ? a.base : a.tamed);
    const Loaded l = load_split(a.data, a.split);
    const fs::path dir = run_dir(a.out, "eval");

    const QuantileReport report = build_report(base, tamed, l, a.delta, a.epsilon, false);
    const StoppingCheck check = stopping_met(tamed, l.split.forget, report.tamed_remember, a.delta, a.epsilon);
    QuantileReport final_report = report;
    final_report.threshold_met = check.met;
    quantile_report_csv(final_report).save(dir / "quantiles.csv");

    nlohmann::json j = to_json(final_report);
    const Eigen::VectorXd nll_rb = nll_values(base, l.split.remember);
    const Eigen::VectorXd nll_rt = nll_values(tamed, l.split.remember);
    j["ks_remember"] = {{"base", ks_json(nll_rb)}, {"tamed", ks_json(nll_rt)}};
    j["forget_max_abs_dist"] = check.max_abs_dist;
    j["mean_nll"] = nlohmann::json::object();
    for (const auto& [name, set] : eval_sets(l))
        j["mean_nll"][name] = {{"base", mean_nll(base, set)}, {"tamed", mean_nll(tamed, set)}};

    histogram_csv(histogram(nll_rb, a.bins)).save(dir / "hist_remember_base.csv");
    histogram_csv(histogram(nll_rt, a.bins)).save(dir / "hist_remember_tamed.csv");
    histogram_csv(histogram(nll_values(base, l.split.forget), a.bins)).save(dir / "hist_forget_base.csv");
    histogram_csv(histogram(nll_values(tamed, l.split.forget), a.bins)).save(dir / "hist_forget_tamed.csv");

    if (a.samples > 0) {
        const NearestMean classify{l.data.component_means};
        Rng rb = make_rng(a.seed, "eval.samples");
        Rng rt = make_rng(a.seed, "eval.samples");
        const auto fb = attribute_fraction(base, classify, l.data.n_components(), a.samples, rb);
        const auto ft = attribute_fraction(tamed, classify, l.data.n_components(), a.samples, rt);
        j["sample_fractions"] = {{"n", a.samples}, {"base", fb}, {"tamed", ft}};
        CsvWriter w({"label", "base", "tamed"});
        for (std::size_t k = 0; k < fb.size(); ++k) w.row({std::to_string(k), format_double(fb[k]), format_double(ft[k])});
        w.save(dir / "fractions.csv");
        std::printf("sample fractions base  [%s]\n", join(fb).c_str());
        std::printf("sample fractions tamed [%s]\n", join(ft).c_str());
    }
    write_text(dir / "report.json", j.dump(2) + "\n");
    echo_config(sub, dir / "config.toml");

    for (const auto& e : final_report.entries)
        std::printf("%-9s q_base %.6g  q_tamed %.6g  drop %.6g\n", e.set_name.c_str(), e.q_base, e.q_tamed,
                    e.quantile_drop);
    std::printf("reference 1 - Phi(delta=%g) = %.6e\n", a.delta, threshold_quantile(a.delta));
    std::printf("KS p-value on remember NLLs: base %.3g, tamed %.3g\n", j["ks_remember"]["base"]["p_value"].get<double>(),
                j["ks_remember"]["tamed"]["p_value"].get<double>());
    return kExitOk;
}

// ------------------------------------------------------------ sample

struct SampleArgs {
    std::string model;
    std::string data;
    std::string output;
    std::string out;
    int n = 10000;
    std::uint64_t seed = 1;
};

int run_sample(const CLI::App& sub, const SampleArgs& a) {
    const FlowModel model = load_checkpoint(a.model);
    Rng rng = make_rng(a.seed, "sample");
    const Batch pts = sample(model, static_cast<std::size_t>(a.n), rng);
    std::vector<int> labels(static_cast<std::size_t>(a.n), -1);
    if (!a.data.empty()) {
        const LabeledDataset ds = load_dataset(a.data);
        const NearestMean classify{ds.component_means};
        for (Eigen::Index i = 0; i < pts.rows(); ++i) labels[static_cast<std::size_t>(i)] = classify(pts.row(i));
        std::printf("fractions [%s]\n", join(label_fractions(pts, classify, ds.n_components())).c_str());
    }
    const fs::path dir = run_dir(a.out, "sample");
    const fs::path file = a.output.empty() ? dir / "samples.csv" : fs::path(a.output);
    samples_csv(pts, labels).save(file);
    echo_config(sub, a.output.empty() ? dir / "config.toml" : fs::path(a.output + ".config.toml"));
    std::printf("wrote %d samples to %s\n", a.n, file.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Normalizing-flow taming on toy mixtures"};
    app.require_subcommand(1);
    app.fallthrough();  // lets --config follow the subcommand name
    app.set_config("--config", "", "Options file: key = value lines under a [command] section");

    GenArgs gen;
    CLI::App* g = app.add_subcommand("gen", "Generate a labeled Gaussian-mixture dataset");
    g->add_option("--preset", gen.preset, "five-gaussians | five-gaussians-shifted | two-gaussians-80-20")
        ->capture_default_str();
    g->add_option("--seed", gen.seed)->capture_default_str();
    g->add_option("-o,--output", gen.output, "Dataset file to write")->required();

    TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "Fit a RealNVP flow by maximum likelihood");
    t->add_option("--data", tr.data)->required();
    t->add_option("--out", tr.out, "Run directory");
    t->add_option("--layers", tr.layers)->capture_default_str();
    t->add_option("--hidden", tr.hidden)->capture_default_str();
    t->add_option("--clamp", tr.clamp, "Bound on per-coordinate log-scale")->capture_default_str();
    t->add_option("--iters", tr.cfg.iterations)->capture_default_str();
    t->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
    t->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
    t->add_option("--seed", tr.cfg.seed)->capture_default_str();
    t->add_option("--eval-every", tr.cfg.eval_every)->capture_default_str();
    t->add_option("--optimizer", tr.optimizer)->capture_default_str();

    TameArgs ta;
    CLI::App* m = app.add_subcommand("tame", "Tame a trained flow away from a forget set");
    m->add_option("--base", ta.base, "Base checkpoint")->required();
    m->add_option("--data", ta.data, "Training dataset")->required();
    m->add_option("--out", ta.out, "Run directory");
    add_split_options(m, ta.split);
    m->add_option("--delta", ta.cfg.delta)->capture_default_str();
    m->add_option("--epsilon", ta.cfg.epsilon)->capture_default_str();
    m->add_option("--alpha", ta.cfg.alpha)->capture_default_str();
    m->add_option("--gamma", ta.cfg.gamma)->capture_default_str();
    m->add_option("--lr", ta.cfg.learning_rate)->capture_default_str();
    m->add_option("--forget-batch", ta.cfg.forget_batch)->capture_default_str();
    m->add_option("--remember-batch", ta.cfg.remember_batch)->capture_default_str();
    m->add_option("--stats-refresh", ta.cfg.stats_refresh)->capture_default_str();
    m->add_option("--max-iters", ta.cfg.max_iterations)->capture_default_str();
    m->add_option("--optimizer", ta.optimizer)->capture_default_str();
    m->add_option("--seed", ta.cfg.seed)->capture_default_str();
    m->add_option("--checkpoint-every", ta.checkpoint_every, "Save intermediate checkpoints (0 = off)")
        ->capture_default_str();
    m->add_flag("--no-remember", ta.no_remember, "Drop the remember loss (alpha weights L_F only)");
    m->add_flag("--no-kl-forward", ta.no_kl_forward);
    m->add_flag("--no-kl-reverse", ta.no_kl_reverse);
    m->add_flag("--no-nll-anchor", ta.no_nll_anchor);

    EvalArgs ev;
    CLI::App* e = app.add_subcommand("eval", "Quantile report, NLL histograms and KS test");
    e->add_option("--base", ev.base)->required();
    e->add_option("--tamed", ev.tamed, "Defaults to the base checkpoint");
    e->add_option("--data", ev.data)->required();
    e->add_option("--out", ev.out, "Run directory");
    add_split_options(e, ev.split);
    e->add_option("--delta", ev.delta)->capture_default_str();
    e->add_option("--epsilon", ev.epsilon)->capture_default_str();
    e->add_option("--bins", ev.bins)->capture_default_str();
    e->add_option("--samples", ev.samples, "Samples for label fractions (0 = skip)")->capture_default_str();
    e->add_option("--seed", ev.seed)->capture_default_str();

    SampleArgs sa;
    CLI::App* s = app.add_subcommand("sample", "Draw samples from a checkpoint");
    s->add_option("--model", sa.model)->required();
    s->add_option("-n,--n", sa.n)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seed", sa.seed)->capture_default_str();
    s->add_option("--data", sa.data, "Dataset whose component means label the samples");
    s->add_option("-o,--output", sa.output, "CSV file (default <run dir>/samples.csv)");
    s->add_option("--out", sa.out, "Run directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (g->parsed()) return run_gen(*g, gen);
        if (t->parsed()) return run_train(*t, tr);
        if (m->parsed()) return run_tame(*m, ta);
        if (e->parsed()) return run_eval(*e, ev);
        if (s->parsed()) return run_sample(*s, sa);
    } catch (const ConfigError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kExitUsage;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
