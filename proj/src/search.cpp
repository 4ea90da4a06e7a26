#include "robnas/search.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace robnas {

std::string_view metric_name(MetricKind m) {
    switch (m) {
        case MetricKind::none: return "none";
        case MetricKind::cb: return "cb";
        case MetricKind::jacobian: return "jacobian";
    }
    return "?";
}

MetricKind parse_metric(std::string_view s) {
    if (s == "none") return MetricKind::none;
    if (s == "cb") return MetricKind::cb;
    if (s == "jacobian" || s == "jac") return MetricKind::jacobian;
    throw ConfigError("unknown metric '" + std::string(s) + "' (expected cb, jacobian or none)");
}

std::string_view unroll_name(Unroll u) { return u == Unroll::first_order ? "first_order" : "second_order"; }

Unroll parse_unroll(std::string_view s) {
    if (s == "first_order" || s == "first") return Unroll::first_order;
    if (s == "second_order" || s == "second") return Unroll::second_order;
    throw ConfigError("unknown unroll '" + std::string(s) + "'");
}

void SearchConfig::validate() const {
    if (!(gamma >= 0)) throw ConfigError("search: gamma must be >= 0");
    if (batch_size == 0) throw ConfigError("search: batch_size must be >= 1");
    if (metric_batch == 0) throw ConfigError("search: metric_batch must be >= 1");
    if (!(inner.lr >= 0) || !(outer.lr >= 0)) throw ConfigError("search: learning rates must be >= 0");
    if (!(virtual_step() >= 0)) throw ConfigError("search: xi must be >= 0");
    if (!(hvp_radius > 0)) throw ConfigError("search: hvp_radius must be positive");
    if (!(eps_init > 0) || !(eps_min > 0) || !(eps_step >= 0)) throw ConfigError("search: bad epsilon schedule");
    if (!(temperature >= 0)) throw ConfigError("search: temperature must be >= 0");
}

SearchConfig search_defaults(MetricKind metric) {
    SearchConfig c;
    c.metric = metric;
    if (metric == MetricKind::cb) {
        c.inner.lr = 0.1;
        c.outer.lr = 6e-4;
        c.outer.weight_decay = 3e-4;
    }
    return c;
}

namespace {

std::vector<Tensor> grads_of(const Gradients& g, const std::vector<Var>& vs) {
    std::vector<Tensor> out;
    out.reserve(vs.size());
    for (const auto& v : vs) out.push_back(g[v]);
    return out;
}

Batch head_rows(const Batch& b, std::size_t n) {
    n = std::min(n, b.y.size());
    return {slice_rows(b.x, 0, n), std::vector<std::size_t>(b.y.begin(), b.y.begin() + static_cast<std::ptrdiff_t>(n))};
}

void check_finite(Real v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

Real norm_of(const std::vector<Tensor>& ts) {
    Real s = 0;
    for (const auto& t : ts)
        for (Real v : t.data()) s += v * v;
    return std::sqrt(s);
}

Model with_weights(const Model& net, const std::vector<Tensor>& w) {
    Model m = net;
    for (std::size_t i = 0; i < w.size(); ++i) m.params[i] = w[i];
    return m;
}

}  // namespace

ObjectiveEval train_loss_grad(const Model& net, const Batch& train, bool grad_weights, bool grad_alpha) {
    Tape t;
    Binding b(t, net, {grad_weights, grad_alpha});
    Var loss = op::cross_entropy(forward(b, t.constant(train.x), BnMode::train), train.y);
    ObjectiveEval r;
    r.val_loss = r.objective = loss.value().item();
    if (grad_weights || grad_alpha) {
        Gradients g = t.backward(loss);
        if (grad_weights) r.grad_weights = grads_of(g, b.params());
        if (grad_alpha) r.grad_alpha = grads_of(g, b.alphas());
    }
    return r;
}

ObjectiveEval evaluate_objective(const Model& net, const Batch& val, const SearchConfig& cfg, Real eps,
                                 bool grad_weights, bool grad_alpha) {
    Tape t;
    Binding b(t, net, {grad_weights, grad_alpha});
    Var loss = op::cross_entropy(forward(b, t.constant(val.x), BnMode::train), val.y);
    ObjectiveEval r;
    r.val_loss = loss.value().item();
    Var obj = loss;
    if (cfg.gamma > 0 && cfg.metric != MetricKind::none) {
        const Batch sub = head_rows(val, cfg.metric_batch);
        Var metric;
        if (cfg.metric == MetricKind::cb) {
            CbMetric cb = cb_metric(b, sub.x, sub.y, eps, cfg.norm, cfg.temperature, cfg.bounds);
            metric = cb.value;
            r.hard_margin = cb.mean_hard_margin;
        } else {
            JacNormConfig jc = cfg.jac;
            jc.norm = cfg.norm;
            metric = jac_metric(b, sub.x, jc).value;
        }
        r.metric = metric.value().item();
        obj = op::sub(loss, op::scale(metric, cfg.gamma));
    }
    r.objective = obj.value().item();
    check_finite(r.objective, "search objective");
    if (grad_weights || grad_alpha) {
        Gradients g = t.backward(obj);
        if (grad_weights) r.grad_weights = grads_of(g, b.params());
        if (grad_alpha) r.grad_alpha = grads_of(g, b.alphas());
    }
    return r;
}

Real inner_step(Model& net, const Batch& train, Optimizer& opt) {
    Tape t;
    Binding b(t, net, {true, false});
    std::vector<BnBatchStats> stats;
    Var loss = op::cross_entropy(forward(b, t.constant(train.x), BnMode::train, &stats), train.y);
    const Real value = loss.value().item();
    check_finite(value, "training loss");
    Gradients g = t.backward(loss);
    std::vector<Tensor> grads = grads_of(g, b.params());
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        ps.push_back(&net.params[i]);
        gs.push_back(&grads[i]);
    }
    opt.step(ps, gs);
    update_running_stats(net, stats);
    return value;
}

std::vector<Tensor> hypergradient(const Model& net, const Batch& val, const Batch& train, const SearchConfig& cfg,
                                  Real eps, ObjectiveEval* info) {
    const Real xi = cfg.virtual_step();
    if (cfg.unroll == Unroll::first_order || xi == 0) {
        ObjectiveEval e = evaluate_objective(net, val, cfg, eps, false, true);
        std::vector<Tensor> g = e.grad_alpha;
        if (info) *info = std::move(e);
        return g;
    }
    // virtual step w' = w - xi grad_w L_train(w, alpha)
    const ObjectiveEval tr = train_loss_grad(net, train, true, false);
    std::vector<Tensor> w_prime = net.params.values();
    for (std::size_t i = 0; i < w_prime.size(); ++i) {
        Tensor step = tr.grad_weights[i];
        step *= xi;
        w_prime[i] -= step;
    }
    ObjectiveEval e = evaluate_objective(with_weights(net, w_prime), val, cfg, eps, true, true);
    std::vector<Tensor> g = e.grad_alpha;
    const Real vn = norm_of(e.grad_weights);
    if (vn > 0) {
        const Real h = cfg.hvp_radius / vn;
        std::vector<Tensor> wp = net.params.values(), wm = net.params.values();
        for (std::size_t i = 0; i < wp.size(); ++i) {
            Tensor d = e.grad_weights[i];
            d *= h;
            wp[i] += d;
            wm[i] -= d;
        }
        const auto gp = train_loss_grad(with_weights(net, wp), train, false, true).grad_alpha;
        const auto gm = train_loss_grad(with_weights(net, wm), train, false, true).grad_alpha;
        for (std::size_t k = 0; k < g.size(); ++k)
            for (std::size_t j = 0; j < g[k].size(); ++j) g[k][j] -= xi * (gp[k][j] - gm[k][j]) / (2 * h);
    }
    if (info) *info = std::move(e);
    return g;
}

ObjectiveEval outer_step(Model& net, Optimizer& arch_opt, const Batch& val, const Batch& train,
                         const SearchConfig& cfg, Real eps) {
    ObjectiveEval info;
    std::vector<Tensor> g = hypergradient(net, val, train, cfg, eps, &info);
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (std::size_t k = 0; k < net.arch.size(); ++k) {
        ps.push_back(&net.arch[k].alpha);
        gs.push_back(&g[k]);
    }
    if (!ps.empty()) arch_opt.step(ps, gs);
    return info;
}

namespace {

// Batches of `size` rows from a seeded permutation, wrapping around.
class BatchStream {
public:
    BatchStream(const Dataset& d, std::size_t size, Rng& rng) : d_(d), size_(std::min(size, d.size())), rng_(rng) {
        reshuffle();
    }
    Batch next() {
        std::vector<std::size_t> rows;
        while (rows.size() < size_) {
            if (pos_ == order_.size()) reshuffle();
            rows.push_back(order_[pos_++]);
        }
        return d_.batch(rows);
    }

private:
    void reshuffle() {
        order_.resize(d_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        rng_.shuffle(order_);
        pos_ = 0;
    }
    const Dataset& d_;
    std::size_t size_;
    Rng& rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

}  // namespace

SearchResult run_search(const SearchConfig& cfg, const SpaceConfig& space, const Dataset& train, const Dataset& val) {
    cfg.validate();
    space.validate();
    train.validate();
    val.validate();
    const auto start = std::chrono::steady_clock::now();
    SearchResult res;
    res.supernet = build_supernet(space, Rng::derive_seed(cfg.seed, "weights"));
    Model& net = res.supernet;
    Optimizer wopt(cfg.inner), aopt(cfg.outer);
    Rng rng(cfg.seed, "search/batches");
    BatchStream tr(train, cfg.batch_size, rng), va(val, cfg.batch_size, rng);
    const std::size_t steps = std::max<std::size_t>(1, std::min(train.size(), val.size()) / cfg.batch_size);
    const Batch probe = head_rows(val.all(), cfg.metric_batch);
    Real eps = cfg.eps_init;

    try {
        for (std::size_t e = 0; e < cfg.epochs; ++e) {
            EpochTrace tr_e;
            tr_e.epoch = e;
            tr_e.epsilon = eps;
            for (std::size_t s = 0; s < steps; ++s) {
                const Batch vb = va.next();
                const Batch tb = tr.next();
                ObjectiveEval o = outer_step(net, aopt, vb, tb, cfg, eps);
                tr_e.val_loss += o.val_loss / static_cast<Real>(steps);
                tr_e.objective += o.objective / static_cast<Real>(steps);
                tr_e.train_loss += inner_step(net, tb, wopt) / static_cast<Real>(steps);
            }
            if (cfg.metric == MetricKind::cb) {
                Tape t;
                Binding b(t, net, {false, false});
                CbMetric cb = cb_metric(b, probe.x, probe.y, eps, cfg.norm, cfg.temperature, cfg.bounds);
                tr_e.metric = cb.value.value().item();
                eps = adapt_epsilon(eps, cb.mean_hard_margin, cfg.eps_step, cfg.eps_min);
            } else if (cfg.metric == MetricKind::jacobian) {
                Tape t;
                Binding b(t, net, {false, false});
                JacNormConfig jc = cfg.jac;
                jc.norm = cfg.norm;
                tr_e.metric = jac_metric(b, probe.x, jc).value.value().item();
            }
            res.trace.push_back(tr_e);
        }
    } catch (const NumericError& err) {
        res.diverged = true;
        res.error = err.what();
    }
    res.genotype = derive_architecture(net, space.intermediate_nodes, space.edges_per_node);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

std::vector<Real> train_weights(Model& model, const Dataset& train, const TrainConfig& cfg) {
    if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    train.validate();
    Optimizer opt(cfg.opt);
    Rng rng(cfg.seed, "train/batches");
    std::vector<Real> losses;
    std::vector<std::size_t> order(train.size());
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        if (cfg.cosine && cfg.epochs > 0 && cfg.opt.lr > 0)
            opt.set_lr(cfg.opt.lr * Real(0.5) *
                       (1 + std::cos(std::numbers::pi_v<Real> * static_cast<Real>(e) / static_cast<Real>(cfg.epochs))));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        Real sum = 0;
        std::size_t nb = 0;
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), at + cfg.batch_size);
            if (end - at < 2 && nb > 0) break;  // a single-row batch has no BN statistics
            std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(at),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
            sum += inner_step(model, train.batch(rows), opt);
            ++nb;
        }
        losses.push_back(sum / static_cast<Real>(std::max<std::size_t>(nb, 1)));
    }
    return losses;
}

RetrainResult retrain(const Genotype& g, const SpaceConfig& space, const Dataset& train, const Dataset& test,
                      const TrainConfig& cfg) {
    RetrainResult r;
    r.model = build_discrete(g, space, Rng::derive_seed(cfg.seed, "weights"));
    r.epoch_loss = train_weights(r.model, train, cfg);
    r.train_accuracy = accuracy(r.model, train.images, train.labels);
    r.test_accuracy = accuracy(r.model, test.images, test.labels);
    return r;
}

}  // namespace robnas
