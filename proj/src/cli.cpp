#include "robnas/cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "robnas/checkpoint.hpp"
#include "robnas/experiment.hpp"

namespace robnas {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string metric;
    std::optional<double> gamma;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config, "Config file (sectioned key = value)");
    app->add_option("--seed", f.seed, "Root seed");
    app->add_option("--out", f.out, "Output directory (default runs/<run id>)");
    app->add_option("--metric", f.metric, "Robustness metric")->check(CLI::IsMember({"cb", "jacobian", "none"}));
    app->add_option("--gamma", f.gamma, "Weight of the robustness metric");
}

Experiment load_experiment(const CommonFlags& f, const std::vector<std::string>& env) {
    ConfigDoc doc = f.config.empty() ? ConfigDoc{} : load_config(f.config);
    apply_env_overrides(doc, env);
    if (f.seed) doc.set("run", "seed", std::to_string(*f.seed));
    if (!f.metric.empty()) doc.set("metric", "kind", f.metric);
    if (f.gamma) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", *f.gamma);
        doc.set("metric", "gamma", buf);
    }
    return resolve(doc);
}

std::string method_label(const SearchConfig& s) {
    if (s.metric == MetricKind::none) return "darts";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s(gamma=%g)", std::string(metric_name(s.metric)).c_str(), static_cast<double>(s.gamma));
    return buf;
}

void fit_space(SpaceConfig& space, const Dataset& d) {
    const Shape s = d.example_shape();
    space.in_channels = s.at(0);
    space.image_hw = s.at(1);
    space.classes = d.classes;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw FormatError("cannot write " + p.string());
    os << text;
}

void add_input(RunRecord& r, const std::string& role, const fs::path& p) {
    if (!fs::exists(p)) throw FormatError("missing input file " + p.string());
    r.inputs[role] = {{"path", p.string()}, {"hash", file_hash(p)}};
}

void add_data_inputs(RunRecord& r, const DataConfig& d) {
    if (d.source != DataSource::idx) return;
    add_input(r, "data.images", d.path / "images-idx3-ubyte");
    add_input(r, "data.labels", d.path / "labels-idx1-ubyte");
}

RunRecord start_record(const std::string& command, const Experiment& ex) {
    RunRecord r;
    r.command = command;
    r.method = method_label(ex.search);
    r.dataset = ex.data.identity();
    r.seed = ex.seed;
    r.config = ex.to_json();
    add_data_inputs(r, ex.data);
    return r;
}

fs::path prepare_out(const std::string& flag, const RunRecord& r) {
    const fs::path dir = flag.empty() ? fs::path("runs") / r.run_id : fs::path(flag);
    fs::create_directories(dir);
    return dir;
}

std::string fmt(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", static_cast<double>(v));
    return buf;
}

std::string summarize(const RunRecord& r, const fs::path& dir) {
    std::string s = r.command + " " + r.run_id + "  method " + r.method + "  data " + r.dataset + "  seed " +
                    std::to_string(r.seed) + "\n";
    for (const auto& [k, v] : r.metrics.items())
        s += "  " + k + " = " + (v.is_number() ? fmt(v.get<Real>()) : v.dump()) + "\n";
    s += "  output " + dir.string() + "\n";
    return s;
}

void finish(RunRecord& r, const fs::path& dir, double seconds, std::ostream& out) {
    r.timing["seconds"] = seconds;
    r.artifacts["record"] = (dir / "record.json").string();
    r.save(dir / "record.json");
    const std::string s = summarize(r, dir);
    write_text(dir / "summary.txt", s);
    out << s;
}

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct LoadedModel {
    Model model;
    Genotype genotype;
    std::string method;
};

LoadedModel load_trained(const fs::path& from, RunRecord& r) {
    const auto g = from / "genotype.json", sp = from / "space.json", m = from / "model.tensors";
    add_input(r, "genotype", g);
    add_input(r, "space", sp);
    add_input(r, "model", m);
    std::ifstream is(sp);
    nlohmann::json sj;
    try {
        sj = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(sp.string() + ": " + e.what());
    }
    LoadedModel lm{{}, Genotype::load(g), r.method};
    lm.model = build_discrete(lm.genotype, space_from_json(sj), 0);
    lm.model.load_tensors(load_tensors(m));
    if (fs::exists(from / "record.json")) lm.method = RunRecord::load(from).method;
    return lm;
}

int cmd_search(const CommonFlags& f, const std::vector<std::string>& env, std::ostream& out) {
    Experiment ex = load_experiment(f, env);
    RunRecord r = start_record("search", ex);
    r.seal();
    const auto t0 = std::chrono::steady_clock::now();
    const Splits s = load_splits(ex.data, ex.seed);
    fit_space(ex.space, s.train);
    const fs::path dir = prepare_out(f.out, r);
    SearchResult res = run_search(ex.search, ex.space, s.train, s.val);

    res.genotype.save(dir / "genotype.json");
    save_tensors(dir / "supernet.tensors", res.supernet.to_tensors());
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& e : res.trace)
        trace.push_back({{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"val_loss", e.val_loss},
                         {"objective", e.objective},
                         {"metric", e.metric},
                         {"epsilon", e.epsilon}});
    write_text(dir / "trace.json", trace.dump(2) + "\n");
    r.artifacts = {{"genotype", (dir / "genotype.json").string()},
                   {"supernet", (dir / "supernet.tensors").string()},
                   {"trace", (dir / "trace.json").string()}};
    r.metrics["epochs_completed"] = res.trace.size();
    r.metrics["diverged"] = res.diverged ? 1 : 0;
    if (!res.trace.empty()) {
        const auto& e = res.trace.back();
        r.metrics["search_train_loss"] = e.train_loss;
        r.metrics["search_val_loss"] = e.val_loss;
        r.metrics["search_objective"] = e.objective;
        r.metrics["search_metric"] = e.metric;
        r.metrics["search_epsilon"] = e.epsilon;
    }
    finish(r, dir, since(t0), out);
    if (res.diverged) throw NumericError("search diverged: " + res.error);
    return 0;
}

int cmd_retrain(const CommonFlags& f, const std::string& from, const std::string& genotype_path,
                const std::vector<std::string>& env, std::ostream& out) {
    if (from.empty() == genotype_path.empty()) throw ConfigError("retrain: give exactly one of --from or --genotype");
    Experiment ex = load_experiment(f, env);
    RunRecord r = start_record("retrain", ex);
    const fs::path gpath = from.empty() ? fs::path(genotype_path) : fs::path(from) / "genotype.json";
    add_input(r, "genotype", gpath);
    if (!from.empty() && fs::exists(fs::path(from) / "record.json"))
        r.method = RunRecord::load(from).method;
    else if (from.empty())
        r.method = "genotype:" + gpath.stem().string();
    r.seal();
    const auto t0 = std::chrono::steady_clock::now();
    const Genotype g = Genotype::load(gpath);
    const Splits s = load_splits(ex.data, ex.seed);
    fit_space(ex.space, s.train);
    if (ex.retrain_channels > 0) ex.space.channels = ex.retrain_channels;
    const fs::path dir = prepare_out(f.out, r);
    RetrainResult res = retrain(g, ex.space, s.train, s.test, ex.retrain);

    g.save(dir / "genotype.json");
    write_text(dir / "space.json", space_to_json(ex.space).dump(2) + "\n");
    save_tensors(dir / "model.tensors", res.model.to_tensors());
    write_text(dir / "train_trace.json", nlohmann::json(res.epoch_loss).dump() + "\n");
    r.artifacts = {{"genotype", (dir / "genotype.json").string()},
                   {"checkpoint", (dir / "model.tensors").string()},
                   {"trace", (dir / "train_trace.json").string()}};
    r.metrics["train_accuracy"] = res.train_accuracy;
    r.metrics["test_accuracy"] = res.test_accuracy;
    if (!res.epoch_loss.empty()) r.metrics["final_train_loss"] = res.epoch_loss.back();
    finish(r, dir, since(t0), out);
    return 0;
}

Dataset head(const Dataset& d, std::size_t n) {
    if (n == 0 || n >= d.size()) return d;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    return d.subset(rows);
}

int cmd_attack(const CommonFlags& f, const std::string& from, const std::vector<std::string>& env, std::ostream& out) {
    if (from.empty()) throw ConfigError("attack: --from <retrain output> is required");
    Experiment ex = load_experiment(f, env);
    RunRecord r = start_record("attack", ex);
    LoadedModel lm = load_trained(from, r);
    r.method = lm.method;
    r.seal();
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset test = head(load_splits(ex.data, ex.seed).test, ex.attack_examples);
    const fs::path dir = prepare_out(f.out, r);
    const RobustnessReport rep = evaluate_robust_accuracy(lm.model, test, ex.attacks);
    r.metrics["clean_accuracy"] = rep.clean_accuracy;
    for (const auto& a : rep.attacks) r.metrics["robust_accuracy." + a.config.label()] = a.accuracy;
    write_text(dir / "attacks.json", rep.to_json().dump(2) + "\n");
    r.artifacts = {{"attacks", (dir / "attacks.json").string()}};
    finish(r, dir, since(t0), out);
    return 0;
}

int cmd_certify(const CommonFlags& f, const std::string& from, const std::vector<std::string>& env, std::ostream& out) {
    if (from.empty()) throw ConfigError("certify: --from <retrain output> is required");
    Experiment ex = load_experiment(f, env);
    RunRecord r = start_record("certify", ex);
    LoadedModel lm = load_trained(from, r);
    r.method = lm.method;
    r.seal();
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset test = head(load_splits(ex.data, ex.seed).test, ex.certify.examples);
    const fs::path dir = prepare_out(f.out, r);
    nlohmann::json per = nlohmann::json::object();
    for (Norm n : ex.certify.norms) {
        Real sum = 0;
        nlohmann::json radii = nlohmann::json::array();
        for (std::size_t i = 0; i < test.size(); ++i) {
            Tensor x = slice_rows(test.images, i, i + 1);
            const Real v = certify_radius(lm.model, x, test.labels[i], n, ex.certify.tol, ex.certify.bounds).value;
            radii.push_back(v);
            sum += v;
        }
        per[std::string(norm_name(n))] = radii;
        r.metrics["certified_radius." + std::string(norm_name(n))] = sum / static_cast<Real>(test.size());
    }
    r.metrics["clean_accuracy"] = accuracy(lm.model, test.images, test.labels);
    write_text(dir / "radii.json", per.dump() + "\n");
    r.artifacts = {{"radii", (dir / "radii.json").string()}};
    finish(r, dir, since(t0), out);
    return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& format, const std::string& out_dir,
               std::ostream& out) {
    std::vector<RunRecord> records;
    for (const auto& p : paths) records.push_back(RunRecord::load(p));
    const ReportFormat fmt_kind = parse_report_format(format);
    const std::string doc = render_report(records, fmt_kind);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / ("report." + format), doc);
    }
    out << doc;
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const std::vector<std::string>& env) {
    CLI::App app{"robnas: robustness-aware differentiable architecture search", "robnas"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string from, genotype, format = "text";
    std::vector<std::string> records;

    auto* search = app.add_subcommand("search", "Search a cell architecture on the train/val splits");
    add_common(search, flags);
    auto* retrain_cmd = app.add_subcommand("retrain", "Train the discrete network of a genotype from scratch");
    add_common(retrain_cmd, flags);
    retrain_cmd->add_option("--from", from, "Output directory of a search run");
    retrain_cmd->add_option("--genotype", genotype, "Genotype JSON file");
    auto* attack = app.add_subcommand("attack", "Robust accuracy of a retrained model under attacks");
    add_common(attack, flags);
    attack->add_option("--from", from, "Output directory of a retrain run")->required();
    auto* certify = app.add_subcommand("certify", "Mean certified radius of a retrained model");
    add_common(certify, flags);
    certify->add_option("--from", from, "Output directory of a retrain run")->required();
    auto* report = app.add_subcommand("report", "Table over run records");
    report->add_option("records", records, "Run records or run directories")->required();
    report->add_option("--format", format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
    report->add_option("--out", flags.out, "Also write report.<format> here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    }

    try {
        if (search->parsed()) return cmd_search(flags, env, out);
        if (retrain_cmd->parsed()) return cmd_retrain(flags, from, genotype, env, out);
        if (attack->parsed()) return cmd_attack(flags, from, env, out);
        if (certify->parsed()) return cmd_certify(flags, from, env, out);
        return cmd_report(records, format, flags.out, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace robnas
