// Acceptance run: one PASS/FAIL line per criterion. Arguments select criteria
// by number (default: all).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include "robnas/attacks.hpp"
#include "robnas/experiment.hpp"
#include "robnas/gradcheck.hpp"

using namespace robnas;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[1024];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// ---------------------------------------------------------------------------
// Random models

void perturb_bn(Model& m, Rng& rng) {
    for (auto& bn : m.bns) {
        bn.running_mean = rng.uniform_tensor(bn.running_mean.shape(), -0.5, 0.5);
        bn.running_var = rng.uniform_tensor(bn.running_var.shape(), 0.3, 2);
        auto& g = m.params[static_cast<std::size_t>(bn.gamma)];
        auto& b = m.params[static_cast<std::size_t>(bn.beta)];
        g = rng.uniform_tensor(g.shape(), -1.5, 1.5);
        b = rng.uniform_tensor(b.shape(), -0.5, 0.5);
    }
}

SpaceConfig tiny_space(bool reduction, std::vector<OpTag> ops) {
    SpaceConfig c;
    c.cells = reduction ? 2 : 1;
    c.intermediate_nodes = 2;
    c.channels = 3;
    c.image_hw = 4;
    c.classes = 3;
    if (reduction) c.reduction_cells = {1};
    c.ops = std::move(ops);
    return c;
}

Model random_supernet(std::uint64_t seed) {
    Rng rng(seed, "supernet");
    Model m = build_supernet(tiny_space(seed % 2 == 0, {kAllOps.begin(), kAllOps.end()}), seed);
    for (auto& a : m.arch) a.alpha = rng.normal_tensor(a.alpha.shape());
    perturb_bn(m, rng);
    return m;
}

Genotype random_genotype(Rng& rng, std::size_t nodes, bool reduce) {
    const std::vector<OpTag> ops{OpTag::sep_conv_3x3, OpTag::sep_conv_5x5, OpTag::dil_conv_3x3, OpTag::dil_conv_5x5,
                                 OpTag::max_pool_3x3, OpTag::avg_pool_3x3, OpTag::identity};
    auto cell = [&] {
        std::vector<GenotypeEdge> es;
        for (std::size_t n = 0; n < nodes; ++n) {
            const std::size_t a = rng.index(n + 2);
            std::size_t b = rng.index(n + 1);
            if (b >= a) ++b;
            es.push_back({n, std::min(a, b), ops[rng.index(ops.size())]});
            es.push_back({n, std::max(a, b), ops[rng.index(ops.size())]});
        }
        return es;
    };
    Genotype g{nodes, cell(), {}};
    if (reduce) g.reduce = cell();
    return g;
}

Model random_discrete(std::uint64_t seed) {
    Rng rng(seed, "discrete");
    const bool reduce = seed % 2 == 1;
    Model m = build_discrete(random_genotype(rng, 2, reduce), tiny_space(reduce, SpaceConfig{}.ops), seed);
    perturb_bn(m, rng);
    return m;
}

Model random_mlp(std::uint64_t seed) {
    Rng rng(seed, "mlp");
    const std::size_t d = 4 + rng.index(6), h = 4 + rng.index(10), k = 2 + rng.index(4);
    GraphBuilder gb({d}, seed);
    int z = gb.relu(gb.linear(gb.input(), h));
    if (seed % 2 == 0) z = gb.relu(gb.linear(z, h));
    return gb.finish(gb.linear(z, k), k);
}

Model tanh_mlp(std::uint64_t seed, std::size_t d, std::size_t h, std::size_t k) {
    GraphBuilder gb({d}, seed);
    int z = gb.tanh(gb.linear(gb.input(), h));
    z = gb.tanh(gb.linear(z, h));
    return gb.finish(gb.linear(z, k), k);
}

Tensor random_input(const Model& m, Rng& rng) {
    return rng.uniform_tensor(batch_shape(1, m.input_shape), 0, 1);
}

Tensor perturbation(Rng& rng, std::size_t n, Real eps, Norm norm, bool boundary) {
    if (norm == Norm::linf) {
        Tensor e = rng.uniform_tensor({n}, -eps, eps);
        if (boundary)
            for (std::size_t i = 0; i < n; ++i) e[i] = e[i] >= 0 ? eps : -eps;
        return e;
    }
    Tensor dir = rng.unit_sphere(n);
    return dir * (boundary ? eps : eps * std::pow(rng.uniform(), Real(1) / static_cast<Real>(n)));
}

Real lp_dist(const Tensor& a, const Tensor& b, std::size_t row, std::size_t d, Norm n) {
    Real s = 0;
    for (std::size_t j = 0; j < d; ++j) {
        const Real v = std::abs(a[row * d + j] - b[row * d + j]);
        s = n == Norm::linf ? std::max(s, v) : s + v * v;
    }
    return n == Norm::linf ? s : std::sqrt(s);
}

Real vector_rel_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    Real diff = 0, ref = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            diff += std::pow(a[i][j] - b[i][j], 2);
            ref += b[i][j] * b[i][j];
        }
    return std::sqrt(diff) / std::max(std::sqrt(ref), Real(1e-12));
}

Real min_margin(const Model& m, const Tensor& x, std::size_t y, Real eps, Norm n) {
    Tape t;
    Binding b(t, m, {false, false});
    const Tensor mg = margin_bounds(b, x, {y}, eps, n).value();
    return *std::min_element(mg.ptr(), mg.ptr() + mg.size());
}

// ---------------------------------------------------------------------------
// Criteria

Outcome soundness() {
    const double t0 = cpu_seconds();
    std::size_t nets = 0, outside = 0, flipped = 0, certified = 0, samples = 0;
    for (std::uint64_t s = 0; s < 60; ++s) {
        Model m = s % 3 == 0 ? random_mlp(s) : s % 3 == 1 ? random_supernet(s) : random_discrete(s);
        ++nets;
        Rng rng(s, "soundness");
        const Tensor x = random_input(m, rng);
        const std::size_t y = argmax_rows(predict_logits(m, x))[0];
        const std::size_t d = x.size();
        for (Norm norm : {Norm::l2, Norm::linf})
            for (Real eps : {0.01, 0.03, 0.1}) {
                Tape t;
                Binding b(t, m, {false, false});
                IntervalVars iv = propagate_bounds(b, x, eps, norm);
                const Tensor lo = iv.lower.value(), hi = iv.upper.value();
                const bool cert = min_margin(m, x, y, eps, norm) > 0;
                certified += cert;
                const std::size_t k = lo.size(), batch = 500;
                for (std::size_t done = 0; done < 10000; done += batch) {
                    Tensor xs(batch_shape(batch, m.input_shape));
                    for (std::size_t r = 0; r < batch; ++r) {
                        const Tensor e = perturbation(rng, d, eps, norm, r % 10 == 0);
                        for (std::size_t i = 0; i < d; ++i) xs[r * d + i] = x[i] + e[i];
                    }
                    const Tensor out = predict_logits(m, xs);
                    const auto pred = argmax_rows(out);
                    for (std::size_t r = 0; r < batch; ++r) {
                        for (std::size_t j = 0; j < k; ++j) {
                            const Real v = out[r * k + j];
                            if (v < lo[j] - 1e-9 || v > hi[j] + 1e-9) ++outside;
                        }
                        if (cert && pred[r] != y) ++flipped;
                    }
                    samples += batch;
                }
            }
    }
    const double cpu = cpu_seconds() - t0;
    return {outside == 0 && flipped == 0 && nets >= 50 && cpu <= 600,
            fmt("%zu nets, %zu samples, %zu containment violations, %zu certified cases with %zu prediction changes, "
                "%.0f s CPU",
                nets, samples, outside, certified, flipped, cpu)};
}

Outcome linear_exactness() {
    const Real tol = 1e-4;
    Real worst = 0;
    std::size_t n = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(s, "linear");
        const std::size_t d = 2 + rng.index(10), k = 2 + rng.index(5);
        GraphBuilder gb({d}, s);
        Model m = gb.finish(gb.linear(gb.input(), k), k);
        const Tensor x = rng.uniform_tensor({1, d}, -1, 1);
        const std::size_t y = argmax_rows(predict_logits(m, x))[0];
        const Tensor &w = m.params[0], &bias = m.params[1];
        for (Norm norm : {Norm::l2, Norm::linf}) {
            Real closed = 1e300;
            for (std::size_t j = 0; j < k; ++j) {
                if (j == y) continue;
                Real gap = bias[y] - bias[j], dual = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    const Real a = w[y * d + i] - w[j * d + i];
                    gap += a * x[i];
                    dual += norm == Norm::l2 ? a * a : std::abs(a);
                }
                closed = std::min(closed, gap / (norm == Norm::l2 ? std::sqrt(dual) : dual));
            }
            worst = std::max(worst, std::abs(certify_radius(m, x, y, norm, tol).value - closed));
            ++n;
        }
    }
    return {worst <= tol, fmt("%zu instances, max |radius - closed form| = %.2e (tol %.0e)", n, worst, tol)};
}

Outcome gradient_fidelity() {
    Real worst_cb = 0, worst_jac = 0;
    std::size_t configs = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Model m = random_supernet(100 + s);
        Rng rng(s, "gradients");
        const Tensor x = rng.uniform_tensor({3, 1, 4, 4}, 0, 1);
        const std::vector<std::size_t> y{rng.index(3), rng.index(3), rng.index(3)};
        const Norm norm = s % 2 ? Norm::l2 : Norm::linf;
        const Real eps = 0.005 + 0.005 * static_cast<Real>(s % 3);
        std::vector<Tensor> alphas;
        for (const auto& a : m.arch) alphas.push_back(a.alpha);
        auto with_alpha = [&](const std::vector<Tensor>& a) {
            Model c = m;
            for (std::size_t i = 0; i < a.size(); ++i) c.arch[i].alpha = a[i];
            return c;
        };
        auto cb_value = [&](const Model& mm) {
            Tape t;
            Binding b(t, mm, {false, false});
            return cb_metric(b, x, y, eps, norm, 50).value.value().item();
        };
        JacNormConfig jc;
        jc.norm = norm;
        jc.delta = default_delta(norm);
        auto jac_value = [&](const Model& mm) {
            Tape t;
            Binding b(t, mm, {false, false});
            return jac_metric(b, x, jc).value.value().item();
        };
        {
            Tape t;
            Binding b(t, m, {false, true});
            Gradients g = t.backward(cb_metric(b, x, y, eps, norm, 50).value);
            std::vector<Tensor> an;
            for (std::size_t i = 0; i < m.arch.size(); ++i) an.push_back(g[b.alpha(static_cast<int>(i))]);
            auto fd = numeric_gradient([&](const std::vector<Tensor>& a) { return cb_value(with_alpha(a)); }, alphas, 1e-6);
            worst_cb = std::max(worst_cb, vector_rel_error(an, fd));
        }
        {
            Tape t;
            Binding b(t, m, {false, true});
            Gradients g = t.backward(jac_metric(b, x, jc).value);
            std::vector<Tensor> an;
            for (std::size_t i = 0; i < m.arch.size(); ++i) an.push_back(g[b.alpha(static_cast<int>(i))]);
            auto fd = numeric_gradient([&](const std::vector<Tensor>& a) { return jac_value(with_alpha(a)); }, alphas, 1e-6);
            worst_jac = std::max(worst_jac, vector_rel_error(an, fd));
        }
        ++configs;
    }
    return {worst_cb < 1e-4 && worst_jac < 1e-3 && sizeof(Real) == 8,
            fmt("%zu configurations, max relative error dR_CB/dalpha %.2e (< 1e-4), dR_Jac/dalpha %.2e (< 1e-3), "
                "%zu-bit reals",
                configs, worst_cb, worst_jac, sizeof(Real) * 8)};
}

Outcome jacobian_estimator() {
    int good = 0;
    Rng rng(7, "estimator");
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        Model m = tanh_mlp(trial, 8, 10, 4);
        const Tensor x = rng.uniform_tensor({1, 8}, -1, 1);
        const Tensor j = exact_jacobian(m, x);
        const Real exact = l2_norm(j.data());
        const Real est = frobenius_estimate(m, x, 500, rng);
        good += std::abs(est - exact) / exact < 0.05;
    }
    Model m = tanh_mlp(1000, 8, 10, 4);
    const Tensor x = rng.uniform_tensor({1, 8}, -1, 1);
    const Real exact2 = std::pow(l2_norm(exact_jacobian(m, x).data()), 2);
    std::vector<Real> logn, logerr;
    for (std::size_t n : {8, 32, 128, 512}) {
        Real s = 0;
        for (int t = 0; t < 300; ++t) s += std::pow(std::pow(frobenius_estimate(m, x, n, rng), 2) - exact2, 2);
        logn.push_back(std::log(static_cast<Real>(n)));
        logerr.push_back(std::log(std::sqrt(s / 300)));
    }
    Real mx = 0, my = 0;
    for (std::size_t i = 0; i < logn.size(); ++i) {
        mx += logn[i] / 4;
        my += logerr[i] / 4;
    }
    Real sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < logn.size(); ++i) {
        sxy += (logn[i] - mx) * (logerr[i] - my);
        sxx += (logn[i] - mx) * (logn[i] - mx);
    }
    const Real slope = sxy / sxx;
    return {good >= 95 && std::abs(slope + 0.5) < 0.1,
            fmt("%d/100 trials within 5%% at n_proj = 500; RMS error slope in n_proj %.3f (expected -0.5)", good, slope)};
}

Outcome taylor_chain() {
    Real worst_excess = -1e300;
    std::size_t checks = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        Rng rng(trial, "taylor");
        const std::size_t d = 3 + rng.index(6), k = 2 + rng.index(3);
        Model m = tanh_mlp(trial, d, 4 + rng.index(8), k);
        const Tensor x = rng.uniform_tensor({1, d}, -1, 1);
        const Tensor j = exact_jacobian(m, x);
        for (Norm p : {Norm::linf, Norm::l2})
            for (Real delta : {1e-3, 1e-4}) {
                std::vector<Tensor> dirs;
                dirs.push_back(p == Norm::linf ? rng.uniform_tensor({1, d}, -1, 1)
                                               : rng.unit_sphere(d).reshaped({1, d}));
                for (std::size_t o = 0; o < k; ++o) {
                    // direction attaining the Hölder bound for output o
                    Tensor e({1, d});
                    Real n2 = 0;
                    for (std::size_t i = 0; i < d; ++i) n2 += j[o * d + i] * j[o * d + i];
                    for (std::size_t i = 0; i < d; ++i)
                        e[i] = p == Norm::linf ? (j[o * d + i] >= 0 ? 1 : -1) : j[o * d + i] / std::sqrt(n2);
                    dirs.push_back(e);
                }
                for (const auto& e : dirs) {
                    const Tensor r = taylor_gap_ratio(m, x, e, delta, p);
                    for (Real v : r.data()) {
                        worst_excess = std::max(worst_excess, (v - 1) / delta);
                        ++checks;
                    }
                }
            }
    }
    return {worst_excess <= 10,
            fmt("%zu ratios on 100 tanh networks; max (ratio - 1) / delta = %.3f (bound 10)", checks, worst_excess)};
}

Outcome darts_degeneracy() {
    std::size_t exact = 0, total = 0;
    Real worst = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        SpaceConfig sp = tiny_space(false, {OpTag::sep_conv_3x3, OpTag::avg_pool_3x3, OpTag::identity, OpTag::zero});
        sp.channels = 2;
        sp.edges_per_node = 1;
        Model base = build_supernet(sp, 200 + s);
        Rng rng(s, "degeneracy");
        for (auto& a : base.arch) a.alpha = rng.normal_tensor(a.alpha.shape(), 0.5);
        const Dataset tr = make_synthetic(SyntheticKind::blobs, 16, 4, 3, 0.05, 2 * s + 1);
        const Dataset va = make_synthetic(SyntheticKind::blobs, 16, 4, 3, 0.05, 2 * s + 2);
        const Batch tb = tr.all(), vb = va.all();
        for (MetricKind mk : {MetricKind::none, MetricKind::cb, MetricKind::jacobian}) {
            SearchConfig cfg = search_defaults(mk);
            cfg.gamma = 0;
            Model a = base;
            Optimizer aopt(cfg.outer);
            outer_step(a, aopt, vb, tb, cfg, 0.03);
            Model ref = base;
            Tape t;
            Binding bd(t, ref, {false, true});
            Var loss = op::cross_entropy(forward(bd, t.constant(vb.x), BnMode::train), vb.y);
            Gradients g = t.backward(loss);
            Optimizer ropt(cfg.outer);
            std::vector<Tensor*> ps{&ref.arch[0].alpha};
            std::vector<const Tensor*> gs{&g[bd.alpha(0)]};
            ropt.step(ps, gs);
            bool same = a.arch[0].alpha == ref.arch[0].alpha;
            for (std::size_t i = 0; i < a.params.size(); ++i) same = same && a.params[i] == base.params[i];
            exact += same;
            ++total;

            SearchConfig c2 = cfg;
            c2.unroll = Unroll::second_order;
            c2.xi = 0.05;
            const auto h = hypergradient(base, vb, tb, c2, 0.03);
            auto unrolled = [&](const std::vector<Tensor>& al) {
                Model m = base;
                m.arch[0].alpha = al[0];
                ObjectiveEval tg = train_loss_grad(m, tb, true, false);
                for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i] -= tg.grad_weights[i] * *c2.xi;
                return evaluate_objective(m, vb, c2, 0.03, false, false).objective;
            };
            const auto fd = numeric_gradient(unrolled, {base.arch[0].alpha}, 1e-5);
            worst = std::max(worst, vector_rel_error(h, fd));
        }
    }
    return {exact == total && worst < 1e-3,
            fmt("first order: %zu/%zu bit-exact with the reference step; second order: max relative error vs "
                "finite-difference oracle %.2e",
                exact, total, worst)};
}

// Desk-scale pipeline on the bundled MNIST subset at 8x8 with 2000 training examples.
struct PipelineResult {
    Genotype genotype;
    Model model;
    Dataset test;
    Real test_accuracy = 0;
};

Experiment desk_experiment(MetricKind metric, Real gamma, std::uint64_t seed) {
    ConfigDoc doc = parse_config(R"(
[data]
source = idx
fractions = 0.4, 0.4, 0.2
[space]
channels = 8
[search]
epochs = 10
batch_size = 64
[retrain]
epochs = 10
batch_size = 64
)");
    doc.set("data", "path", std::string(ROBNAS_DATA_DIR) + "/mnist5k");
    doc.set("run", "seed", std::to_string(seed));
    doc.set("metric", "kind", std::string(metric_name(metric)));
    doc.set("metric", "gamma", fmt("%.17g", static_cast<double>(gamma)));
    return resolve(doc);
}

PipelineResult pipeline(MetricKind metric, Real gamma, std::uint64_t seed) {
    Experiment ex = desk_experiment(metric, gamma, seed);
    const Splits s = load_splits(ex.data, ex.seed);
    ex.space.classes = s.train.classes;
    SearchResult sr = run_search(ex.search, ex.space, s.train, s.val);
    if (sr.diverged) throw NumericError("search diverged: " + sr.error);
    RetrainResult rr = retrain(sr.genotype, ex.space, s.train, s.test, ex.retrain);
    return {sr.genotype, std::move(rr.model), s.test, rr.test_accuracy};
}

std::string ops_of(const Genotype& g) {
    std::string s;
    for (const auto& e : g.normal) s += (s.empty() ? "" : ",") + std::string(op_tag_name(e.op));
    return s;
}

Outcome certified_ordering() {
    const double t0 = cpu_seconds();
    Real sum[2][2] = {};  // [method][norm]
    std::string archs;
    for (std::uint64_t seed = 1; seed <= 3; ++seed)
        for (int method = 0; method < 2; ++method) {
            PipelineResult p = pipeline(MetricKind::cb, method == 0 ? 0.01 : 0.0, seed);
            archs += fmt(" seed%llu/%s=[%s]", static_cast<unsigned long long>(seed), method == 0 ? "cb" : "base",
                         ops_of(p.genotype).c_str());
            const std::size_t n = 200;
            for (int ni = 0; ni < 2; ++ni) {
                const Norm norm = ni == 0 ? Norm::linf : Norm::l2;
                Real r = 0;
                for (std::size_t i = 0; i < n; ++i)
                    r += certify_radius(p.model, slice_rows(p.test.images, i, i + 1), p.test.labels[i], norm, 1e-6).value;
                sum[method][ni] += r / static_cast<Real>(n) / 3;
            }
        }
    const double cpu = cpu_seconds() - t0;
    const bool ok = sum[0][0] > sum[1][0] && sum[0][1] > sum[1][1] && cpu <= 1800;
    return {ok, fmt("mean certified radius over 3 seeds, CB(gamma=0.01) vs gamma=0: linf %.3e vs %.3e, l2 %.3e vs "
                    "%.3e; %.0f s CPU;",
                    sum[0][0], sum[1][0], sum[0][1], sum[1][1], cpu) +
                    archs};
}

Outcome attack_ordering() {
    Real robust[2] = {}, clean[2] = {};
    std::string archs;
    AttackConfig pgd10;
    pgd10.eps = 0.03;
    pgd10.step = 0.0075;
    pgd10.iterations = 10;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Genotype gs[2];
        for (int method = 0; method < 2; ++method) {
            PipelineResult p = pipeline(MetricKind::jacobian, method == 0 ? 0.01 : 0.0, seed);
            gs[method] = p.genotype;
            pgd10.seed = Rng::derive_seed(seed, "attacks");
            const RobustnessReport rep = evaluate_robust_accuracy(p.model, p.test, {pgd10});
            robust[method] += rep.attacks[0].accuracy / 3;
            clean[method] += rep.clean_accuracy / 3;
        }
        archs += fmt(" seed%llu: %s", static_cast<unsigned long long>(seed),
                     gs[0] == gs[1] ? "same genotype" : ("jac=[" + ops_of(gs[0]) + "] base=[" + ops_of(gs[1]) + "]").c_str());
    }
    const bool ok = robust[0] >= robust[1] && std::abs(clean[0] - clean[1]) <= 0.03;
    return {ok, fmt("PGD10 linf 0.03 accuracy over 3 seeds, Jacobian(gamma=0.01) %.4f vs gamma=0 %.4f; clean %.4f vs "
                    "%.4f;",
                    robust[0], robust[1], clean[0], clean[1]) +
                    archs};
}

Outcome attack_correctness() {
    std::size_t fgsm_same = 0, fgsm_total = 0, constraint_violations = 0, outputs = 0;
    std::size_t certified = 0, cert_violations = 0;
    for (std::uint64_t s = 0; s < 30; ++s) {
        Model m = s % 2 ? random_discrete(300 + s) : random_supernet(300 + s);
        Rng rng(s, "attack-correctness");
        const Tensor x = rng.uniform_tensor({6, 1, 4, 4}, 0, 1);
        const auto y = argmax_rows(predict_logits(m, x));
        for (Real eps : {0.01, 0.03, 0.1}) {
            AttackConfig one;
            one.iterations = 1;
            one.step = eps;
            one.eps = eps;
            one.random_start = false;
            fgsm_same += pgd(m, x, y, one) == fgsm(m, x, y, eps);
            ++fgsm_total;
            for (Norm n : {Norm::linf, Norm::l2})
                for (AttackKind k : {AttackKind::fgsm, AttackKind::pgd, AttackKind::cw_l2}) {
                    if (k == AttackKind::fgsm && n == Norm::l2) continue;
                    if (k == AttackKind::cw_l2 && n == Norm::linf) continue;
                    AttackConfig c;
                    c.kind = k;
                    c.norm = n;
                    c.eps = eps;
                    c.step = eps / 4;
                    c.iterations = k == AttackKind::cw_l2 ? 30 : 10;
                    c.seed = s;
                    const Tensor adv = run_attack(m, x, y, c);
                    for (Real v : adv.data()) constraint_violations += !(v >= -1e-9 && v <= 1 + 1e-9);
                    for (std::size_t i = 0; i < 6; ++i) {
                        ++outputs;
                        const Real dist = lp_dist(adv, x, i, 16, n);
                        if (k != AttackKind::cw_l2 && dist > eps + 1e-9) ++constraint_violations;
                    }
                }
        }
        // certificate consistency
        for (std::size_t i = 0; i < 6; ++i) {
            const Tensor xi = slice_rows(x, i, i + 1);
            for (Norm n : {Norm::linf, Norm::l2}) {
                const Real r = certify_radius(m, xi, y[i], n, 1e-6).value;
                if (r <= 0) continue;
                ++certified;
                std::vector<AttackConfig> cs(n == Norm::linf ? 2 : 2);
                cs[0].kind = n == Norm::linf ? AttackKind::fgsm : AttackKind::cw_l2;
                cs[0].iterations = 50;
                cs[1].kind = AttackKind::pgd;
                cs[1].iterations = 20;
                cs[1].step = r / 4;
                for (auto& c : cs) {
                    c.eps = r;
                    c.norm = n;
                    const Tensor adv = run_attack(m, xi, {y[i]}, c);
                    if (lp_dist(adv, xi, 0, 16, n) > r) continue;
                    cert_violations += argmax_rows(predict_logits(m, adv))[0] != y[i];
                }
            }
        }
    }
    return {fgsm_same == fgsm_total && constraint_violations == 0 && cert_violations == 0 && certified > 0,
            fmt("PGD(1, step=eps) == FGSM bit-exact in %zu/%zu cases; %zu adversarial outputs with %zu ball/clamp "
                "violations; %zu certified (example, norm) pairs attacked at their radius with %zu successes",
                fgsm_same, fgsm_total, outputs, constraint_violations, certified, cert_violations)};
}

Outcome reproducibility() {
    const fs::path dir = fs::temp_directory_path() / ("robnas_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "micro.ini") << R"([data]
source = stripes
n = 120
classes = 3
image_hw = 6
[space]
channels = 4
[search]
epochs = 2
batch_size = 16
[metric]
kind = jacobian
[retrain]
epochs = 3
batch_size = 16
[attack]
kinds = fgsm, pgd, cw_l2
cw_iterations = 20
[certify]
examples = 10
)";
    const std::string cli = ROBNAS_CLI_PATH;
    const std::string cfg = (dir / "micro.ini").string();
    std::size_t identical = 0, compared = 0;
    bool ran = true;
    auto run = [&](const std::string& args) {
        const std::string cmd = "\"" + cli + "\" " + args + " > /dev/null";
        ran = ran && std::system(cmd.c_str()) == 0;
    };
    for (const char* rep : {"a", "b"}) {
        const fs::path d = dir / rep;
        const std::string common = " --config " + cfg + " --seed 17";
        run("search" + common + " --out " + (d / "search").string());
        run("retrain" + common + " --from " + (d / "search").string() + " --out " + (d / "retrain").string());
        run("attack" + common + " --from " + (d / "retrain").string() + " --out " + (d / "attack").string());
        run("certify" + common + " --from " + (d / "retrain").string() + " --out " + (d / "certify").string());
    }
    if (ran)
        for (const char* step : {"search", "retrain", "attack", "certify"}) {
            ++compared;
            identical += RunRecord::load(dir / "a" / step).metrics.dump() == RunRecord::load(dir / "b" / step).metrics.dump();
        }
    fs::remove_all(dir);
    return {ran && compared == 4 && identical == compared,
            fmt("%s; %zu/%zu subcommands produced byte-identical metrics on repeat", ran ? "all CLI runs exited 0" : "a CLI run failed",
                identical, compared)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"certified-bound soundness", soundness},
        {"linear-model exactness", linear_exactness},
        {"gradient fidelity", gradient_fidelity},
        {"Jacobian estimator", jacobian_estimator},
        {"Hölder/Taylor chain", taylor_chain},
        {"DARTS degeneracy", darts_degeneracy},
        {"certified radius ordering (CB vs gamma=0)", certified_ordering},
        {"robust accuracy ordering (Jacobian vs gamma=0)", attack_ordering},
        {"attack correctness", attack_correctness},
        {"CLI reproducibility", reproducibility},
    };
    std::set<int> pick;
    for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!pick.empty() && !pick.contains(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %d %s: %s (%.1f s) %s\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL", secs,
                    o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
