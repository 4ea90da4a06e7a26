#include "robnas/jacnorm.hpp"

#include <cmath>
#include <string>

namespace robnas {

std::string_view jac_estimator_name(JacEstimator e) {
    return e == JacEstimator::exact_rows ? "exact_rows" : "random_projection";
}

JacEstimator parse_jac_estimator(std::string_view s) {
    if (s == "exact_rows" || s == "exact") return JacEstimator::exact_rows;
    if (s == "random_projection" || s == "projection") return JacEstimator::random_projection;
    throw ConfigError("unknown Jacobian estimator '" + std::string(s) + "'");
}

int dual_exponent(Norm p) { return p == Norm::linf ? 1 : 2; }

Real default_delta(Norm p) { return p == Norm::linf ? Real(8) / 255 : Real(0.5); }

namespace {

std::size_t example_size(const Model& m) { return shape_numel(m.input_shape); }

// Input vector-Jacobian products: row i of the result is seeds[i]^T J(x_i).
Tensor vjp_rows(const Model& m, const Tensor& x, const Tensor& seeds) {
    Tape t;
    Binding b(t, m, {false, false});
    Var xin = t.leaf(x);
    Var y = forward(b, xin, BnMode::eval);
    return t.backward(y, &seeds)[xin];
}

Tensor replicate_rows(const Tensor& x, std::size_t times) {
    const std::size_t n = x.dim(0), d = x.size() / std::max<std::size_t>(n, 1);
    Shape s = x.shape();
    s[0] = n * times;
    Tensor out(s);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < times; ++r) std::copy(x.ptr() + i * d, x.ptr() + (i + 1) * d, out.ptr() + (i * times + r) * d);
    return out;
}

// Records J(x_rows) dirs on the tape, one row per direction.
Var jvp(Binding& b, const Tensor& xs, const Tensor& dirs, const JacNormConfig& cfg) {
    Tape& t = b.tape();
    if (cfg.jvp == JvpMode::tangent) return forward_tangent(b, t.constant(xs), t.constant(dirs)).tangent;
    if (!(cfg.fd_h > 0)) throw ConfigError("jacnorm: finite-difference step must be positive");
    Var up = forward(b, t.constant(xs + dirs * cfg.fd_h), BnMode::eval);
    Var dn = forward(b, t.constant(xs - dirs * cfg.fd_h), BnMode::eval);
    return op::scale(op::sub(up, dn), Real(0.5) / cfg.fd_h);
}

}  // namespace

Tensor exact_jacobian(const Model& model, const Tensor& x, std::size_t cap) {
    const std::size_t k = model.num_classes, n = x.dim(0), d = example_size(model);
    if (k > cap)
        throw ConfigError("exact Jacobian needs " + std::to_string(k) + " backward passes (cap " + std::to_string(cap) +
                          "); use the random_projection estimator");
    Tape t;
    Binding b(t, model, {false, false});
    Var xin = t.leaf(x);
    Var y = forward(b, xin, BnMode::eval);
    if (y.shape() != Shape{n, k}) throw ShapeError("exact_jacobian: model output is not N x K");
    Tensor jac({n, k, d});
    for (std::size_t c = 0; c < k; ++c) {
        Tensor seed({n, k});
        for (std::size_t i = 0; i < n; ++i) seed[i * k + c] = 1;
        const Gradients gr = t.backward(y, &seed, true);
        const Tensor& g = gr[xin];
        for (std::size_t i = 0; i < n; ++i) std::copy(g.ptr() + i * d, g.ptr() + (i + 1) * d, jac.ptr() + (i * k + c) * d);
    }
    return jac;
}

Real frobenius_estimate(const Model& model, const Tensor& x, std::size_t n_proj, Rng& rng) {
    if (n_proj == 0) throw ConfigError("frobenius_estimate: n_proj must be >= 1");
    if (x.dim(0) != 1) throw ShapeError("frobenius_estimate expects a single example");
    const std::size_t k = model.num_classes;
    Tensor seeds({n_proj, k});
    for (std::size_t p = 0; p < n_proj; ++p) {
        Tensor v = rng.unit_sphere(k);
        std::copy(v.ptr(), v.ptr() + k, seeds.ptr() + p * k);
    }
    const Tensor u = vjp_rows(model, replicate_rows(x, n_proj), seeds);
    Real s = 0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * u[i];
    return std::sqrt(static_cast<Real>(k) * s / static_cast<Real>(n_proj));
}

JacMetric jac_metric(Binding& b, const Tensor& x, const JacNormConfig& cfg) {
    const Model& m = b.model();
    const std::size_t n = x.dim(0), k = m.num_classes, d = example_size(m);
    if (n == 0) throw Error("jac_metric: empty batch");
    if (!(cfg.delta > 0)) throw ConfigError("jac_metric: delta must be positive");
    JacMetric res{Var{}, Tensor({n})};

    if (cfg.estimator == JacEstimator::exact_rows) {
        const Tensor jac = exact_jacobian(m, x, cfg.exact_cap);
        const int q = dual_exponent(cfg.norm);
        // direction s_{i,k} = d||J_k||_q / dJ_k on row i*K + k
        Tensor dirs(batch_shape(n * k, m.input_shape));
        std::vector<std::size_t> pick(n * k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < k; ++c) {
                const Real* row = jac.ptr() + (i * k + c) * d;
                Real* s = dirs.ptr() + (i * k + c) * d;
                Real nrm = 0;
                if (q == 1) {
                    for (std::size_t j = 0; j < d; ++j) {
                        s[j] = row[j] > 0 ? Real(1) : (row[j] < 0 ? Real(-1) : Real(0));
                        nrm += std::abs(row[j]);
                    }
                } else {
                    nrm = l2_norm({row, d});
                    if (nrm > 0)
                        for (std::size_t j = 0; j < d; ++j) s[j] = row[j] / nrm;
                }
                res.per_example[i] += nrm / static_cast<Real>(k);
                pick[i * k + c] = (i * k + c) * k + c;
            }
        Var jv = jvp(b, replicate_rows(x, k), dirs, cfg);
        Var norms = op::gather(jv, std::move(pick), {n * k});
        res.value = op::scale(op::mean(norms), -cfg.delta);
        return res;
    }

    if (cfg.norm != Norm::l2) throw ConfigError("random_projection estimator requires the l2 attack norm");
    if (cfg.n_proj == 0) throw ConfigError("jac_metric: n_proj must be >= 1");
    const std::size_t P = cfg.n_proj;
    Rng rng(cfg.seed, "jacnorm/projections");
    Tensor seeds({n * P, k});
    for (std::size_t r = 0; r < n * P; ++r) {
        Tensor v = rng.unit_sphere(k);
        std::copy(v.ptr(), v.ptr() + k, seeds.ptr() + r * k);
    }
    const Tensor xs = replicate_rows(x, P);
    const Tensor u = vjp_rows(m, xs, seeds);  // row (i,p) = v^T J(x_i)
    // per row: 2 v^T J u - ||u||^2 has value ||u||^2 and the gradient of ||J^T v||^2
    Var vju = op::sum_rows(op::mul_const(jvp(b, xs, u, cfg), seeds));
    Tensor usq({n * P});
    for (std::size_t r = 0; r < n * P; ++r) usq[r] = -std::pow(l2_norm({u.ptr() + r * d, d}), 2);
    Var sq = op::add_const(op::scale(vju, 2), usq);
    // S_i = K * mean_p; metric row = sqrt(S_i / K) = sqrt(mean_p)
    Var per_row = op::reshape(sq, {n, P});
    Var mean_p = op::scale(op::sum_rows(per_row), Real(1) / static_cast<Real>(P));
    Var fro = op::sqrt(mean_p);
    for (std::size_t i = 0; i < n; ++i) res.per_example[i] = fro.value()[i];
    res.value = op::scale(op::mean(fro), -cfg.delta);
    return res;
}

Tensor taylor_gap_ratio(const Model& model, const Tensor& x, const Tensor& e, Real delta, Norm p) {
    if (x.dim(0) != 1) throw ShapeError("taylor_gap_ratio expects a single example");
    require_same_shape(x, e, "taylor_gap_ratio direction");
    const std::size_t k = model.num_classes, d = example_size(model);
    const Tensor jac = exact_jacobian(model, x, std::max<std::size_t>(k, 32));
    const Tensor f0 = predict_logits(model, x), f1 = predict_logits(model, x + e * delta);
    const int q = dual_exponent(p);
    Tensor ratio({k});
    for (std::size_t c = 0; c < k; ++c) {
        Real nrm = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const Real v = jac[c * d + j];
            nrm += q == 1 ? std::abs(v) : v * v;
        }
        if (q == 2) nrm = std::sqrt(nrm);
        const Real shift = std::abs(f1[c] - f0[c]);
        ratio[c] = nrm > 0 ? shift / (delta * nrm) : (shift == 0 ? Real(0) : std::numeric_limits<Real>::infinity());
    }
    return ratio;
}

}  // namespace robnas
