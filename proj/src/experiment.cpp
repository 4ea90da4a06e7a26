#include "robnas/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

namespace robnas {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t at = 0;
    while (at <= s.size()) {
        const auto comma = s.find(',', at);
        const auto end = comma == std::string_view::npos ? s.size() : comma;
        std::string item = trim(s.substr(at, end - at));
        if (!item.empty()) out.push_back(std::move(item));
        if (comma == std::string_view::npos) break;
        at = comma + 1;
    }
    return out;
}

std::string real_str(Real v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, static_cast<double>(v));
    return std::string(buf, r.ptr);
}

// Typed views of a ConfigDoc; every failure names the offending key.
class Reader {
public:
    explicit Reader(const ConfigDoc& d) : doc_(d) {}

    std::optional<std::string> str(const char* sec, const char* key) const { return doc_.get(sec, key); }

    template <class T>
    void uint(const char* sec, const char* key, T& out) const {
        if (auto v = str(sec, key)) {
            std::uint64_t x = 0;
            auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
            if (ec != std::errc() || p != v->data() + v->size()) bad(sec, key, *v, "a non-negative integer");
            out = static_cast<T>(x);
        }
    }

    void real(const char* sec, const char* key, Real& out) const {
        if (auto v = str(sec, key)) out = parse_real(sec, key, *v);
    }

    void boolean(const char* sec, const char* key, bool& out) const {
        if (auto v = str(sec, key)) {
            const std::string l = lower(*v);
            if (l == "true" || l == "1" || l == "yes" || l == "on")
                out = true;
            else if (l == "false" || l == "0" || l == "no" || l == "off")
                out = false;
            else
                bad(sec, key, *v, "a boolean");
        }
    }

    template <class F>
    auto parsed(const char* sec, const char* key, const std::string& v, F f) const {
        try {
            return f(v);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(sec) + "." + key + ": " + e.what());
        }
    }

    static Real parse_real(const char* sec, const char* key, const std::string& v) {
        double x = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
        if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) bad(sec, key, v, "a finite number");
        return static_cast<Real>(x);
    }

    [[noreturn]] static void bad(const char* sec, const char* key, const std::string& v, const char* want) {
        throw ConfigError(std::string(sec) + "." + key + ": '" + v + "' is not " + want);
    }

private:
    const ConfigDoc& doc_;
};

std::string_view source_name(DataSource s) {
    switch (s) {
        case DataSource::idx: return "idx";
        case DataSource::blobs: return "blobs";
        case DataSource::stripes: return "stripes";
    }
    return "?";
}

std::string_view output_name(CellOutput o) { return o == CellOutput::concat ? "concat" : "sum"; }

CellOutput parse_output(std::string_view s) {
    if (s == "concat") return CellOutput::concat;
    if (s == "sum") return CellOutput::sum;
    throw ConfigError("unknown cell output '" + std::string(s) + "'");
}

std::string_view jvp_name(JvpMode m) { return m == JvpMode::tangent ? "tangent" : "finite_difference"; }

JvpMode parse_jvp(std::string_view s) {
    if (s == "tangent") return JvpMode::tangent;
    if (s == "finite_difference" || s == "fd") return JvpMode::finite_difference;
    throw ConfigError("unknown jvp mode '" + std::string(s) + "'");
}

nlohmann::json optimizer_json(const OptimizerConfig& o) {
    return {{"kind", o.kind == OptimizerKind::sgd ? "sgd" : "adam"},
            {"lr", o.lr},
            {"momentum", o.momentum},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"weight_decay", o.weight_decay}};
}

std::string hex(const unsigned char* p, unsigned n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < n; ++i) {
        s += digits[p[i] >> 4];
        s += digits[p[i] & 15];
    }
    return s;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// ConfigDoc

const std::map<std::string, std::vector<std::string>>& ConfigDoc::known_keys() {
    static const std::map<std::string, std::vector<std::string>> keys{
        {"run", {"seed"}},
        {"data", {"source", "path", "image_hw", "limit", "n", "classes", "noise", "fractions"}},
        {"space", {"cells", "nodes", "channels", "edges_per_node", "ops", "reduction_cells", "output"}},
        {"search",
         {"epochs", "batch_size", "unroll", "xi", "hvp_radius", "inner_lr", "inner_momentum", "inner_weight_decay",
          "alpha_lr", "alpha_beta1", "alpha_weight_decay"}},
        {"metric",
         {"kind", "gamma", "norm", "batch", "eps_init", "eps_step", "eps_min", "temperature", "substitution_depth",
          "estimator", "n_proj", "delta", "exact_cap", "jvp"}},
        {"retrain", {"epochs", "batch_size", "lr", "momentum", "weight_decay", "cosine", "channels"}},
        {"attack",
         {"kinds", "eps", "norm", "step", "iterations", "random_start", "c", "kappa", "lr", "cw_iterations",
          "examples"}},
        {"certify", {"norms", "examples", "tol", "substitution_depth"}},
    };
    return keys;
}

void ConfigDoc::set(const std::string& section, const std::string& key, std::string value) {
    const auto& k = known_keys();
    auto it = k.find(section);
    if (it == k.end()) throw ConfigError("unknown config section '" + section + "'");
    if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
        throw ConfigError("unknown config key '" + section + "." + key + "'");
    values_[section][key] = std::move(value);
}

std::optional<std::string> ConfigDoc::get(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    if (s == values_.end()) return std::nullopt;
    auto v = s->second.find(key);
    if (v == s->second.end()) return std::nullopt;
    return v->second;
}

ConfigDoc parse_config(std::string_view text, std::string_view origin) {
    ConfigDoc doc;
    std::string section;
    std::size_t lineno = 0;
    std::istringstream is{std::string(text)};
    for (std::string raw; std::getline(is, raw);) {
        ++lineno;
        const auto where = [&] { return std::string(origin) + ":" + std::to_string(lineno) + ": "; };
        std::string line = raw;
        if (auto h = line.find_first_of("#;"); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where() + "unterminated section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (!ConfigDoc::known_keys().contains(section))
                throw ConfigError(where() + "unknown config section '" + section + "'");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where() + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where() + "key outside of any section");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        try {
            doc.set(section, key, trim(std::string_view(line).substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where() + e.what());
        }
    }
    return doc;
}

ConfigDoc load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

void apply_env_overrides(ConfigDoc& doc, const std::vector<std::string>& env) {
    static constexpr std::string_view prefix = "ROBNAS_";
    for (const auto& e : env) {
        if (!e.starts_with(prefix)) continue;
        const auto eq = e.find('=');
        if (eq == std::string::npos) continue;
        const std::string name = e.substr(0, eq);
        if (name == "ROBNAS_SIMD") continue;  // kernel backend selection
        const std::string rest = lower(name.substr(prefix.size()));
        const auto us = rest.find('_');
        if (us == std::string::npos) throw ConfigError("environment override " + name + " names no key");
        try {
            doc.set(rest.substr(0, us), rest.substr(us + 1), e.substr(eq + 1));
        } catch (const ConfigError& err) {
            throw ConfigError("environment override " + name + ": " + err.what());
        }
    }
}

// ---------------------------------------------------------------------------
// Resolution

std::string DataConfig::identity() const {
    std::string s(source_name(source));
    if (source == DataSource::idx) {
        s += ":" + path.filename().string();
        if (limit > 0) s += ":n" + std::to_string(limit);
    } else {
        s += ":n" + std::to_string(n) + ":k" + std::to_string(classes) + ":noise" + real_str(noise);
    }
    return s + "@" + std::to_string(image_hw) + "x" + std::to_string(image_hw);
}

Experiment resolve(const ConfigDoc& doc) {
    const Reader r(doc);
    Experiment ex;
    r.uint("run", "seed", ex.seed);

    auto& d = ex.data;
    if (auto v = r.str("data", "source")) {
        if (*v == "idx" || *v == "mnist")
            d.source = DataSource::idx;
        else
            d.source = r.parsed("data", "source", *v, [](const std::string& s) {
                return parse_synthetic_kind(s) == SyntheticKind::blobs ? DataSource::blobs : DataSource::stripes;
            });
    }
    d.path = r.str("data", "path").value_or(std::string(ROBNAS_DEFAULT_DATA_DIR) + "/mnist5k");
    r.uint("data", "image_hw", d.image_hw);
    r.uint("data", "limit", d.limit);
    r.uint("data", "n", d.n);
    r.uint("data", "classes", d.classes);
    r.real("data", "noise", d.noise);
    if (auto v = r.str("data", "fractions")) {
        const auto parts = split_list(*v);
        if (parts.size() != 3) Reader::bad("data", "fractions", *v, "three comma-separated numbers");
        for (std::size_t k = 0; k < 3; ++k) d.fractions[k] = Reader::parse_real("data", "fractions", parts[k]);
    }

    auto& sp = ex.space;
    sp.image_hw = d.image_hw;
    r.uint("space", "cells", sp.cells);
    r.uint("space", "nodes", sp.intermediate_nodes);
    r.uint("space", "channels", sp.channels);
    r.uint("space", "edges_per_node", sp.edges_per_node);
    if (auto v = r.str("space", "ops")) {
        sp.ops.clear();
        for (const auto& o : split_list(*v)) sp.ops.push_back(r.parsed("space", "ops", o, [](const std::string& s) {
            return parse_op_tag(s);
        }));
    }
    if (auto v = r.str("space", "reduction_cells")) {
        sp.reduction_cells.clear();
        for (const auto& c : split_list(*v)) {
            std::size_t k = 0;
            auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), k);
            if (ec != std::errc() || p != c.data() + c.size()) Reader::bad("space", "reduction_cells", *v, "a list of cell indices");
            sp.reduction_cells.push_back(k);
        }
    }
    if (auto v = r.str("space", "output")) sp.output = r.parsed("space", "output", *v, parse_output);

    MetricKind kind = MetricKind::none;
    if (auto v = r.str("metric", "kind")) kind = r.parsed("metric", "kind", *v, parse_metric);
    auto& s = ex.search;
    s = search_defaults(kind);
    s.seed = Rng::derive_seed(ex.seed, "search");
    r.uint("search", "epochs", s.epochs);
    r.uint("search", "batch_size", s.batch_size);
    if (auto v = r.str("search", "unroll")) s.unroll = r.parsed("search", "unroll", *v, parse_unroll);
    if (auto v = r.str("search", "xi")) s.xi = Reader::parse_real("search", "xi", *v);
    r.real("search", "hvp_radius", s.hvp_radius);
    r.real("search", "inner_lr", s.inner.lr);
    r.real("search", "inner_momentum", s.inner.momentum);
    r.real("search", "inner_weight_decay", s.inner.weight_decay);
    r.real("search", "alpha_lr", s.outer.lr);
    r.real("search", "alpha_beta1", s.outer.beta1);
    r.real("search", "alpha_weight_decay", s.outer.weight_decay);
    r.real("metric", "gamma", s.gamma);
    if (auto v = r.str("metric", "norm")) s.norm = r.parsed("metric", "norm", *v, parse_norm);
    r.uint("metric", "batch", s.metric_batch);
    r.real("metric", "eps_init", s.eps_init);
    r.real("metric", "eps_step", s.eps_step);
    r.real("metric", "eps_min", s.eps_min);
    r.real("metric", "temperature", s.temperature);
    r.uint("metric", "substitution_depth", s.bounds.substitution_depth);
    s.jac.norm = s.norm;
    s.jac.delta = default_delta(s.norm);
    s.jac.seed = Rng::derive_seed(ex.seed, "projections");
    if (auto v = r.str("metric", "estimator")) s.jac.estimator = r.parsed("metric", "estimator", *v, parse_jac_estimator);
    r.uint("metric", "n_proj", s.jac.n_proj);
    r.real("metric", "delta", s.jac.delta);
    r.uint("metric", "exact_cap", s.jac.exact_cap);
    if (auto v = r.str("metric", "jvp")) s.jac.jvp = r.parsed("metric", "jvp", *v, parse_jvp);

    auto& t = ex.retrain;
    t.seed = Rng::derive_seed(ex.seed, "retrain");
    r.uint("retrain", "epochs", t.epochs);
    r.uint("retrain", "batch_size", t.batch_size);
    r.real("retrain", "lr", t.opt.lr);
    r.real("retrain", "momentum", t.opt.momentum);
    r.real("retrain", "weight_decay", t.opt.weight_decay);
    r.boolean("retrain", "cosine", t.cosine);
    r.uint("retrain", "channels", ex.retrain_channels);

    AttackConfig base;
    base.seed = Rng::derive_seed(ex.seed, "attacks");
    r.real("attack", "eps", base.eps);
    if (auto v = r.str("attack", "norm")) base.norm = r.parsed("attack", "norm", *v, parse_norm);
    r.real("attack", "step", base.step);
    r.uint("attack", "iterations", base.iterations);
    r.boolean("attack", "random_start", base.random_start);
    r.real("attack", "c", base.c);
    r.real("attack", "kappa", base.kappa);
    r.real("attack", "lr", base.lr);
    std::size_t cw_iterations = 100;
    r.uint("attack", "cw_iterations", cw_iterations);
    r.uint("attack", "examples", ex.attack_examples);
    std::vector<std::string> kinds{"fgsm", "pgd"};
    if (auto v = r.str("attack", "kinds")) kinds = split_list(*v);
    for (const auto& k : kinds) {
        AttackConfig a = base;
        a.kind = r.parsed("attack", "kinds", k, parse_attack_kind);
        if (a.kind == AttackKind::cw_l2) {
            a.iterations = cw_iterations;
            a.norm = Norm::l2;
        }
        if (a.kind == AttackKind::fgsm) a.norm = Norm::linf;
        r.parsed("attack", "kinds", k, [&](const std::string&) {
            a.validate();
            return 0;
        });
        ex.attacks.push_back(a);
    }

    auto& c = ex.certify;
    if (auto v = r.str("certify", "norms")) {
        c.norms.clear();
        for (const auto& n : split_list(*v)) c.norms.push_back(r.parsed("certify", "norms", n, parse_norm));
    }
    r.uint("certify", "examples", c.examples);
    r.real("certify", "tol", c.tol);
    r.uint("certify", "substitution_depth", c.bounds.substitution_depth);
    if (!(c.tol > 0)) throw ConfigError("certify.tol must be positive");

    sp.validate();
    s.validate();
    return ex;
}

nlohmann::json space_to_json(const SpaceConfig& s) {
    nlohmann::json ops = nlohmann::json::array();
    for (OpTag o : s.ops) ops.push_back(op_tag_name(o));
    return {{"cells", s.cells},
            {"nodes", s.intermediate_nodes},
            {"channels", s.channels},
            {"in_channels", s.in_channels},
            {"image_hw", s.image_hw},
            {"classes", s.classes},
            {"edges_per_node", s.edges_per_node},
            {"ops", ops},
            {"reduction_cells", s.reduction_cells},
            {"output", output_name(s.output)}};
}

SpaceConfig space_from_json(const nlohmann::json& j) {
    try {
        SpaceConfig s;
        s.cells = j.at("cells");
        s.intermediate_nodes = j.at("nodes");
        s.channels = j.at("channels");
        s.in_channels = j.at("in_channels");
        s.image_hw = j.at("image_hw");
        s.classes = j.at("classes");
        s.edges_per_node = j.at("edges_per_node");
        s.ops.clear();
        for (const auto& o : j.at("ops")) s.ops.push_back(parse_op_tag(o.get<std::string>()));
        s.reduction_cells = j.at("reduction_cells").get<std::vector<std::size_t>>();
        s.output = parse_output(j.at("output").get<std::string>());
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("space description: ") + e.what());
    }
}

nlohmann::json Experiment::to_json() const {
    nlohmann::json attacks_j = nlohmann::json::array();
    for (const auto& a : attacks) attacks_j.push_back(a.to_json());
    nlohmann::json norms = nlohmann::json::array();
    for (Norm n : certify.norms) norms.push_back(norm_name(n));
    const auto& s = search;
    return {
        {"seed", seed},
        {"data",
         {{"source", source_name(data.source)},
          {"identity", data.identity()},
          {"image_hw", data.image_hw},
          {"limit", data.limit},
          {"n", data.n},
          {"classes", data.classes},
          {"noise", data.noise},
          {"fractions", data.fractions}}},
        {"space", space_to_json(space)},
        {"search",
         {{"metric", metric_name(s.metric)},
          {"gamma", s.gamma},
          {"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"unroll", unroll_name(s.unroll)},
          {"xi", s.virtual_step()},
          {"hvp_radius", s.hvp_radius},
          {"inner", optimizer_json(s.inner)},
          {"outer", optimizer_json(s.outer)},
          {"seed", s.seed},
          {"metric_batch", s.metric_batch},
          {"norm", norm_name(s.norm)},
          {"eps_init", s.eps_init},
          {"eps_step", s.eps_step},
          {"eps_min", s.eps_min},
          {"temperature", s.temperature},
          {"substitution_depth", s.bounds.substitution_depth},
          {"jacobian",
           {{"estimator", jac_estimator_name(s.jac.estimator)},
            {"n_proj", s.jac.n_proj},
            {"delta", s.jac.delta},
            {"exact_cap", s.jac.exact_cap},
            {"jvp", jvp_name(s.jac.jvp)},
            {"seed", s.jac.seed}}}}},
        {"retrain",
         {{"epochs", retrain.epochs},
          {"batch_size", retrain.batch_size},
          {"opt", optimizer_json(retrain.opt)},
          {"cosine", retrain.cosine},
          {"channels", retrain_channels},
          {"seed", retrain.seed}}},
        {"attack", {{"attacks", attacks_j}, {"examples", attack_examples}}},
        {"certify",
         {{"norms", norms},
          {"examples", certify.examples},
          {"tol", certify.tol},
          {"substitution_depth", certify.bounds.substitution_depth}}}};
}

Splits load_splits(const DataConfig& d, std::uint64_t seed) {
    Dataset all;
    if (d.source == DataSource::idx) {
        all = load_idx(d.path / "images-idx3-ubyte", d.path / "labels-idx1-ubyte", d.image_hw, d.limit);
    } else {
        const auto kind = d.source == DataSource::blobs ? SyntheticKind::blobs : SyntheticKind::stripes;
        all = make_synthetic(kind, d.n, d.image_hw, d.classes, d.noise, Rng::derive_seed(seed, "data"));
    }
    return split(all, d.fractions, seed);
}

// ---------------------------------------------------------------------------
// Records

std::string git_blob_hash(std::string_view payload) {
    std::string data = "blob " + std::to_string(payload.size());
    data.push_back('\0');
    data.append(payload);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 failed");
    return hex(md, len);
}

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return git_blob_hash(ss.str());
}

void RunRecord::seal() {
    std::string payload = command + "\n" + config.dump() + "\n";
    for (const auto& [role, h] : inputs.items()) payload += role + " " + h.value("hash", std::string()) + "\n";
    content_hash = git_blob_hash(payload);
    run_id = command + "-" + content_hash.substr(0, 12);
}

nlohmann::json RunRecord::to_json() const {
    return {{"run_id", run_id},     {"command", command},   {"timestamp", timestamp},
            {"method", method},     {"dataset", dataset},   {"seed", seed},
            {"config", config},     {"content_hash", content_hash}, {"inputs", inputs},
            {"metrics", metrics},   {"artifacts", artifacts}, {"timing", timing}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    try {
        RunRecord r;
        r.run_id = j.at("run_id");
        r.command = j.at("command");
        r.timestamp = j.value("timestamp", std::string());
        r.method = j.at("method");
        r.dataset = j.at("dataset");
        r.seed = j.value("seed", std::uint64_t{0});
        r.config = j.value("config", nlohmann::json::object());
        r.content_hash = j.value("content_hash", std::string());
        r.inputs = j.value("inputs", nlohmann::json::object());
        r.metrics = j.at("metrics");
        r.artifacts = j.value("artifacts", nlohmann::json::object());
        r.timing = j.value("timing", nlohmann::json::object());
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("run record: ") + e.what());
    }
}

void RunRecord::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    RunRecord r = *this;
    if (r.timestamp.empty()) r.timestamp = utc_now();
    os << r.to_json().dump(2) << "\n";
}

RunRecord RunRecord::load(const std::filesystem::path& path) {
    const auto file = std::filesystem::is_directory(path) ? path / "record.json" : path;
    std::ifstream is(file);
    if (!is) throw FormatError("cannot read run record " + file.string());
    try {
        return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(file.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Reports

ReportFormat parse_report_format(std::string_view s) {
    if (s == "text") return ReportFormat::text;
    if (s == "csv") return ReportFormat::csv;
    if (s == "json") return ReportFormat::json;
    throw ConfigError("unknown report format '" + std::string(s) + "' (expected text, csv or json)");
}

std::vector<ReportRow> report_rows(std::vector<RunRecord> records) {
    for (const auto& r : records)
        if (r.dataset != records.front().dataset)
            throw ConfigError("report: records mix datasets '" + records.front().dataset + "' and '" + r.dataset + "'");
    std::stable_sort(records.begin(), records.end(),
                     [](const RunRecord& a, const RunRecord& b) { return a.run_id < b.run_id; });
    std::vector<ReportRow> rows;
    std::vector<std::vector<Real>> values;
    for (const auto& r : records)
        for (const auto& [key, v] : r.metrics.items()) {
            if (!v.is_number()) continue;
            const std::string name = r.command + "/" + key;
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const ReportRow& row) { return row.method == r.method && row.metric == name; });
            if (it == rows.end()) {
                rows.push_back({r.method, name, 0, 0, 0});
                values.emplace_back();
                it = rows.end() - 1;
            }
            values[static_cast<std::size_t>(it - rows.begin())].push_back(v.get<Real>());
        }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& v = values[i];
        Real sum = 0;
        for (Real x : v) sum += x;
        const Real mean = sum / static_cast<Real>(v.size());
        Real ss = 0;
        for (Real x : v) ss += (x - mean) * (x - mean);
        rows[i].mean = mean;
        rows[i].std = v.size() > 1 ? std::sqrt(ss / static_cast<Real>(v.size() - 1)) : 0;
        rows[i].runs = v.size();
    }
    return rows;
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string short_num(Real v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", static_cast<double>(v));
    return buf;
}

}  // namespace

std::string render_report(const std::vector<RunRecord>& records, ReportFormat format) {
    if (records.empty()) throw ConfigError("report: no run records");
    const auto rows = report_rows(records);
    const std::string& dataset = records.front().dataset;
    std::ostringstream os;
    switch (format) {
        case ReportFormat::json: {
            nlohmann::json j = {{"dataset", dataset}, {"rows", nlohmann::json::array()}};
            for (const auto& r : rows)
                j["rows"].push_back(
                    {{"method", r.method}, {"metric", r.metric}, {"mean", r.mean}, {"std", r.std}, {"runs", r.runs}});
            os << j.dump(2) << "\n";
            break;
        }
        case ReportFormat::csv:
            os << "method,metric,mean,std,runs\n";
            for (const auto& r : rows)
                os << csv_field(r.method) << "," << csv_field(r.metric) << "," << real_str(r.mean) << ","
                   << real_str(r.std) << "," << r.runs << "\n";
            break;
        case ReportFormat::text: {
            std::vector<std::array<std::string, 4>> cells{{"method", "metric", "value", "runs"}};
            for (const auto& r : rows) {
                std::string value = short_num(r.mean);
                if (r.runs > 1) value += " ± " + short_num(r.std);
                cells.push_back({r.method, r.metric, value, std::to_string(r.runs)});
            }
            std::array<std::size_t, 4> width{};
            const auto display = [](const std::string& s) {
                // count code points so "±" takes one column
                return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
            };
            for (const auto& c : cells)
                for (std::size_t k = 0; k < 4; ++k) width[k] = std::max(width[k], display(c[k]));
            os << "dataset: " << dataset << "\n";
            for (std::size_t i = 0; i < cells.size(); ++i) {
                for (std::size_t k = 0; k < 4; ++k) {
                    os << cells[i][k];
                    if (k + 1 < 4) os << std::string(width[k] - display(cells[i][k]) + 2, ' ');
                }
                os << "\n";
                if (i == 0) {
                    std::size_t total = 0;
                    for (auto w : width) total += w + 2;
                    os << std::string(total - 2, '-') << "\n";
                }
            }
            break;
        }
    }
    return os.str();
}

std::vector<ReportRow> parse_report_csv(std::string_view csv) {
    std::vector<std::vector<std::string>> lines;
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (std::size_t i = 0; i < csv.size(); ++i) {
        const char c = csv[i];
        if (quoted) {
            if (c == '"' && i + 1 < csv.size() && csv[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else if (c == '\n') {
            lines.push_back(std::move(fields));
            fields.assign(1, {});
        } else {
            fields.back() += c;
        }
    }
    if (fields.size() > 1 || !fields[0].empty()) lines.push_back(std::move(fields));
    if (lines.empty() || lines[0] != std::vector<std::string>{"method", "metric", "mean", "std", "runs"})
        throw FormatError("report csv: bad header");
    std::vector<ReportRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto& f = lines[i];
        if (f.size() != 5) throw FormatError("report csv: line " + std::to_string(i + 1) + " has " + std::to_string(f.size()) + " fields");
        ReportRow r{f[0], f[1], 0, 0, 0};
        double m = 0, s = 0;
        std::from_chars(f[2].data(), f[2].data() + f[2].size(), m);
        std::from_chars(f[3].data(), f[3].data() + f[3].size(), s);
        std::from_chars(f[4].data(), f[4].data() + f[4].size(), r.runs);
        r.mean = static_cast<Real>(m);
        r.std = static_cast<Real>(s);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace robnas
