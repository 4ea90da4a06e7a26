#include "robnas/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "robnas/optim.hpp"
#include "robnas/rng.hpp"

namespace robnas {

std::string_view attack_kind_name(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::pgd: return "pgd";
        case AttackKind::cw_l2: return "cw_l2";
    }
    return "?";
}

AttackKind parse_attack_kind(std::string_view s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "pgd") return AttackKind::pgd;
    if (s == "cw_l2" || s == "cw") return AttackKind::cw_l2;
    throw ConfigError("unknown attack '" + std::string(s) + "'");
}

void AttackConfig::validate() const {
    if (!(eps >= 0)) throw ConfigError("attack: eps must be >= 0");
    if (iterations == 0) throw ConfigError("attack: iterations must be >= 1");
    if (kind == AttackKind::pgd && !(step > 0)) throw ConfigError("attack: step must be > 0");
    if (kind == AttackKind::cw_l2 && (!(lr > 0) || !(c >= 0) || !(kappa >= 0))) throw ConfigError("attack: bad C&W settings");
}

std::string AttackConfig::label() const {
    std::ostringstream os;
    os << (kind == AttackKind::cw_l2 ? "cw" : attack_kind_name(kind));
    if (kind != AttackKind::fgsm) os << iterations;
    os << '-' << (kind == AttackKind::cw_l2 ? "l2" : norm_name(norm));
    if (kind != AttackKind::cw_l2) os << '-' << eps;
    return os.str();
}

nlohmann::json AttackConfig::to_json() const {
    return {{"kind", attack_kind_name(kind)}, {"eps", eps},       {"step", step},   {"iterations", iterations},
            {"norm", norm_name(norm)},        {"random_start", random_start},      {"c", c},
            {"kappa", kappa},                 {"lr", lr},         {"seed", seed}};
}

Tensor input_gradient(const Model& model, const Tensor& x, const std::vector<std::size_t>& y) {
    Tape t;
    Binding b(t, model, {false, false});
    Var xin = t.leaf(x);
    Var loss = op::scale(op::cross_entropy(forward(b, xin, BnMode::eval), y), static_cast<Real>(y.size()));
    Gradients g = t.backward(loss);
    Tensor out = g[xin];
    if (!out.all_finite()) throw NumericError("non-finite input gradient");
    return out;
}

namespace {

Real sgn(Real v) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); }

std::size_t row_size(const Tensor& x) { return x.size() / std::max<std::size_t>(x.dim(0), 1); }

void clamp01(Tensor& x) {
    for (Real& v : x.data()) v = std::clamp<Real>(v, 0, 1);
}

// Projects adv onto the p-ball of radius eps around x, then clamps to [0, 1].
void project(Tensor& adv, const Tensor& x, Real eps, Norm norm) {
    const std::size_t n = x.dim(0), d = row_size(x);
    if (norm == Norm::linf) {
        for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = std::clamp(adv[i], x[i] - eps, x[i] + eps);
    } else {
        for (std::size_t r = 0; r < n; ++r) {
            Real s = 0;
            for (std::size_t j = 0; j < d; ++j) s += std::pow(adv[r * d + j] - x[r * d + j], 2);
            const Real nrm = std::sqrt(s);
            if (nrm > eps) {
                const Real f = eps / nrm;
                for (std::size_t j = 0; j < d; ++j) adv[r * d + j] = x[r * d + j] + f * (adv[r * d + j] - x[r * d + j]);
            }
        }
    }
    clamp01(adv);
}

}  // namespace

Tensor fgsm(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, Real eps) {
    if (!(eps >= 0)) throw ConfigError("fgsm: eps must be >= 0");
    const Tensor g = input_gradient(model, x, y);
    Tensor adv = x;
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = x[i] + eps * sgn(g[i]);
    clamp01(adv);
    return adv;
}

Tensor pgd(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg) {
    cfg.validate();
    const std::size_t n = x.dim(0), d = row_size(x);
    Tensor adv = x;
    if (cfg.random_start && cfg.eps > 0) {
        Rng rng(cfg.seed, "attacks/start");
        for (std::size_t r = 0; r < n; ++r) {
            if (cfg.norm == Norm::linf) {
                for (std::size_t j = 0; j < d; ++j) adv[r * d + j] += rng.uniform(-cfg.eps, cfg.eps);
            } else {
                const Tensor dir = rng.unit_sphere(d);
                const Real rad = cfg.eps * std::pow(rng.uniform(), Real(1) / static_cast<Real>(d));
                for (std::size_t j = 0; j < d; ++j) adv[r * d + j] += rad * dir[j];
            }
        }
        project(adv, x, cfg.eps, cfg.norm);
    }
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const Tensor g = input_gradient(model, adv, y);
        if (cfg.norm == Norm::linf) {
            for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += cfg.step * sgn(g[i]);
        } else {
            for (std::size_t r = 0; r < n; ++r) {
                const Real gn = l2_norm({g.ptr() + r * d, d});
                if (gn == 0) continue;
                for (std::size_t j = 0; j < d; ++j) adv[r * d + j] += cfg.step * g[r * d + j] / gn;
            }
        }
        project(adv, x, cfg.eps, cfg.norm);
    }
    return adv;
}

CwResult cw_l2(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg) {
    cfg.validate();
    const std::size_t n = x.dim(0), d = row_size(x);
    CwResult res{x, std::vector<bool>(n, false)};
    std::vector<Real> best(n, std::numeric_limits<Real>::infinity());
    {
        const auto pred = argmax_rows(predict_logits(model, x));
        for (std::size_t i = 0; i < n; ++i)
            if (pred[i] != y[i]) {
                res.success[i] = true;
                best[i] = 0;
            }
    }
    const Real lim = 1 - Real(1e-6);
    Tensor w(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) w[i] = std::atanh(std::clamp<Real>(2 * x[i] - 1, -lim, lim));
    OptimizerConfig oc;
    oc.kind = OptimizerKind::adam;
    oc.lr = cfg.lr;
    Optimizer opt(oc);
    const Tensor ones(x.shape(), Real(1));
    for (std::size_t it = 0; it <= cfg.iterations; ++it) {
        Tape t;
        Binding b(t, model, {false, false});
        Var wv = t.leaf(w);
        Var adv = op::scale(op::add_const(op::tanh(wv), ones), Real(0.5));
        Var delta = op::add_const(adv, x * Real(-1));
        Var logits = forward(b, adv, BnMode::eval);
        // record successes of the current iterate
        const Tensor& z = logits.value();
        const std::size_t k = z.dim(1);
        const auto pred = argmax_rows(z);
        for (std::size_t i = 0; i < n; ++i) {
            if (best[i] == 0 || pred[i] == y[i]) continue;
            const Real nrm = l2_norm({delta.value().ptr() + i * d, d});
            if (nrm < best[i]) {
                best[i] = nrm;
                res.success[i] = true;
                std::copy(adv.value().ptr() + i * d, adv.value().ptr() + (i + 1) * d, res.x_adv.ptr() + i * d);
            }
        }
        if (it == cfg.iterations || k < 2) break;
        Var margin = op::min_rows(op::interval_margin(logits, logits, y));
        Var hinge = op::add_const(op::relu(op::add_const(margin, Tensor({n}, cfg.kappa))), Tensor({n}, -cfg.kappa));
        Var loss = op::add(op::sum(op::mul(delta, delta)), op::scale(op::sum(hinge), cfg.c));
        Gradients g = t.backward(loss);
        opt.step(w, g[wv]);
    }
    for (Real& v : res.x_adv.data()) v = std::clamp<Real>(v, 0, 1);
    return res;
}

Tensor run_attack(const Model& model, const Tensor& x, const std::vector<std::size_t>& y, const AttackConfig& cfg) {
    switch (cfg.kind) {
        case AttackKind::fgsm: return fgsm(model, x, y, cfg.eps);
        case AttackKind::pgd: return pgd(model, x, y, cfg);
        case AttackKind::cw_l2: return cw_l2(model, x, y, cfg).x_adv;
    }
    throw ConfigError("unknown attack kind");
}

nlohmann::json RobustnessReport::to_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& o : attacks)
        a.push_back({{"attack", o.config.label()}, {"config", o.config.to_json()}, {"accuracy", o.accuracy},
                     {"correct", o.correct}});
    return {{"clean_accuracy", clean_accuracy}, {"clean_correct", clean_correct}, {"attacks", a}};
}

RobustnessReport evaluate_robust_accuracy(const Model& model, const Dataset& data,
                                          const std::vector<AttackConfig>& attacks, std::size_t batch) {
    if (batch == 0) throw ConfigError("evaluate_robust_accuracy: batch must be >= 1");
    data.validate();
    for (const auto& a : attacks) a.validate();
    RobustnessReport rep;
    const std::size_t n = data.size();
    rep.clean_correct.resize(n);
    rep.attacks.resize(attacks.size());
    for (std::size_t a = 0; a < attacks.size(); ++a) {
        rep.attacks[a].config = attacks[a];
        rep.attacks[a].correct.resize(n);
    }
    for (std::size_t at = 0, bi = 0; at < n; at += batch, ++bi) {
        const std::size_t end = std::min(n, at + batch);
        const Tensor x = slice_rows(data.images, at, end);
        const std::vector<std::size_t> y(data.labels.begin() + static_cast<std::ptrdiff_t>(at),
                                         data.labels.begin() + static_cast<std::ptrdiff_t>(end));
        const auto clean = argmax_rows(predict_logits(model, x));
        for (std::size_t i = 0; i < y.size(); ++i) rep.clean_correct[at + i] = clean[i] == y[i];
        for (std::size_t a = 0; a < attacks.size(); ++a) {
            AttackConfig c = attacks[a];
            c.seed = Rng::derive_seed(attacks[a].seed, "batch" + std::to_string(bi));
            const auto pred = argmax_rows(predict_logits(model, run_attack(model, x, y, c)));
            for (std::size_t i = 0; i < y.size(); ++i) rep.attacks[a].correct[at + i] = pred[i] == y[i];
        }
    }
    auto frac = [n](const std::vector<bool>& v) {
        return static_cast<Real>(std::count(v.begin(), v.end(), true)) / static_cast<Real>(n);
    };
    rep.clean_accuracy = frac(rep.clean_correct);
    for (auto& o : rep.attacks) o.accuracy = frac(o.correct);
    return rep;
}

}  // namespace robnas
