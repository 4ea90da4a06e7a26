#include "robnas/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace robnas {

std::string_view norm_name(Norm n) { return n == Norm::l2 ? "l2" : "linf"; }

Norm parse_norm(std::string_view s) {
    if (s == "2" || s == "l2") return Norm::l2;
    if (s == "inf" || s == "linf") return Norm::linf;
    throw ConfigError("unknown norm '" + std::string(s) + "' (expected l2 or linf)");
}

// ---------------------------------------------------------------- dense block bounds

namespace {

Tensor identity_matrix(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1;
    return m;
}

// out = M+ P + M- Q  (M: a x b, P/Q: b x c)
Tensor mix_product(const Tensor& M, const Tensor& P, const Tensor& Q) {
    const std::size_t a = M.dim(0), bdim = M.dim(1), c = P.dim(1);
    Tensor out({a, c});
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t k = 0; k < bdim; ++k) {
            const Real m = M[i * bdim + k];
            if (m == 0) continue;
            const Tensor& src = m > 0 ? P : Q;
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += m * src[k * c + j];
        }
    return out;
}

Tensor mix_vec(const Tensor& M, const Tensor& p, const Tensor& q, const Tensor& bias) {
    const std::size_t a = M.dim(0), bdim = M.dim(1);
    Tensor out = bias;
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t k = 0; k < bdim; ++k) {
            const Real m = M[i * bdim + k];
            out[i] += m * (m > 0 ? p[k] : q[k]);
        }
    return out;
}

Tensor run_single(const Model& model, int node, const Tensor& x) {
    Tape t;
    Binding b(t, model, {false, false});
    return apply_node(b, node, {t.constant(x)}, BnMode::eval, nullptr, x.dim(0)).value();
}

}  // namespace

LinearBounds relu_linear_bounds(const Tensor& lower, const Tensor& upper) {
    require_same_shape(lower, upper, "relu_linear_bounds");
    const std::size_t n = lower.size();
    LinearBounds lb{Tensor({n, n}), Tensor({n}), Tensor({n, n}), Tensor({n})};
    for (std::size_t i = 0; i < n; ++i) {
        const Real l = lower[i], u = upper[i];
        if (l > u) throw Error("relu_linear_bounds: lower exceeds upper");
        if (l >= 0) {
            lb.A_L[i * n + i] = lb.A_U[i * n + i] = 1;
        } else if (u <= 0) {
            // inactive: both bounds zero
        } else {
            const Real s = u / (u - l);
            lb.A_U[i * n + i] = s;
            lb.B_U[i] = -s * l;
            lb.A_L[i * n + i] = u >= -l ? Real(1) : Real(0);
        }
    }
    return lb;
}

LinearBounds batchnorm_linear_bounds(const Tensor& gamma, const Tensor& beta, const Tensor& mean, const Tensor& var,
                                     Real eps) {
    const std::size_t n = gamma.size();
    if (beta.size() != n || mean.size() != n || var.size() != n) throw ShapeError("batchnorm_linear_bounds: sizes");
    LinearBounds lb{Tensor({n, n}), Tensor({n}), Tensor({n, n}), Tensor({n})};
    for (std::size_t i = 0; i < n; ++i) {
        const Real d = var[i] + std::max(eps, Real(0));
        if (!(d > 0)) throw NumericError("batchnorm_linear_bounds: variance + eps must be positive");
        const Real a = gamma[i] / std::sqrt(d);
        lb.A_L[i * n + i] = lb.A_U[i * n + i] = a;
        lb.B_L[i] = lb.B_U[i] = beta[i] - a * mean[i];
    }
    return lb;
}

IntervalBounds concretize(const LinearBounds& lb, const IntervalBounds& in) {
    IntervalBounds out{mix_vec(lb.A_L, in.lower, in.upper, lb.B_L), mix_vec(lb.A_U, in.upper, in.lower, lb.B_U)};
    return out;
}

LinearBounds block_bounds(const Model& model, const std::vector<int>& chain, const IntervalBounds& in) {
    if (chain.empty()) throw Error("block_bounds: empty chain");
    require_same_shape(in.lower, in.upper, "block_bounds input");
    for (std::size_t i = 0; i < in.lower.size(); ++i)
        if (in.lower[i] > in.upper[i]) throw Error("block_bounds: invalid input interval");
    const std::size_t d_in = in.lower.size();
    LinearBounds cur{identity_matrix(d_in), Tensor({d_in}), identity_matrix(d_in), Tensor({d_in})};
    int prev = -1;
    for (int id : chain) {
        const GraphNode& nd = model.nodes.at(static_cast<std::size_t>(id));
        if (nd.inputs.size() != 1 || (prev >= 0 && nd.inputs[0] != prev))
            throw Error("block_bounds: chain must be a path of single-input nodes");
        const Shape& in_shape = model.nodes[static_cast<std::size_t>(nd.inputs[0])].shape;
        const std::size_t d_cur = shape_numel(in_shape);
        if (cur.A_L.dim(0) != d_cur) throw ShapeError("block_bounds: input box does not match the first node");
        const std::size_t d_out = shape_numel(nd.shape);
        switch (nd.kind) {
            case NodeKind::conv:
            case NodeKind::batchnorm:
            case NodeKind::avg_pool:
            case NodeKind::global_avg_pool:
            case NodeKind::flatten:
            case NodeKind::linear: {
                Tensor basis = identity_matrix(d_cur).reshaped(batch_shape(d_cur, in_shape));
                const Tensor y = run_single(model, id, basis);
                const Tensor c = run_single(model, id, Tensor(batch_shape(1, in_shape)));
                Tensor M({d_out, d_cur});
                for (std::size_t j = 0; j < d_cur; ++j)
                    for (std::size_t i = 0; i < d_out; ++i) M[i * d_cur + j] = y[j * d_out + i] - c[i];
                const Tensor bias = c.reshaped({d_out});
                LinearBounds next{mix_product(M, cur.A_L, cur.A_U), mix_vec(M, cur.B_L, cur.B_U, bias),
                                  mix_product(M, cur.A_U, cur.A_L), mix_vec(M, cur.B_U, cur.B_L, bias)};
                cur = std::move(next);
                break;
            }
            case NodeKind::relu: {
                const IntervalBounds z = concretize(cur, in);
                const LinearBounds r = relu_linear_bounds(z.lower, z.upper);
                for (std::size_t i = 0; i < d_out; ++i) {
                    const Real al = r.A_L[i * d_out + i], au = r.A_U[i * d_out + i];
                    for (std::size_t j = 0; j < d_in; ++j) {
                        cur.A_L[i * d_in + j] *= al;
                        cur.A_U[i * d_in + j] *= au;
                    }
                    cur.B_L[i] *= al;
                    cur.B_U[i] = au * cur.B_U[i] + r.B_U[i];
                }
                break;
            }
            case NodeKind::max_pool:
            case NodeKind::tanh: {
                // monotone: constant bounds from the concretized interval
                const IntervalBounds z = concretize(cur, in);
                const Tensor lo = run_single(model, id, z.lower.reshaped(batch_shape(1, in_shape)));
                const Tensor hi = run_single(model, id, z.upper.reshaped(batch_shape(1, in_shape)));
                cur = {Tensor({d_out, d_in}), lo.reshaped({d_out}), Tensor({d_out, d_in}), hi.reshaped({d_out})};
                break;
            }
            default:
                throw Error("block_bounds: unsupported node kind '" + std::string(node_kind_name(nd.kind)) + "'");
        }
        prev = id;
    }
    return cur;
}

// ---------------------------------------------------------------- graph interpreter

namespace {

struct Box {
    Var c;
    std::optional<Var> r;  // empty: l2 ball of radius eps around c
};

struct Interp {
    Binding& b;
    Real eps;
    BoundOptions opts;

    Tape& tape() { return b.tape(); }

    Box to_box(const Box& s) {
        if (s.r) return s;
        return {s.c, tape().constant(Tensor(s.c.shape(), eps))};
    }

    static Box from_lu(const Var& l, const Var& u) {
        return {op::scale(op::add(l, u), Real(0.5)), op::scale(op::sub(u, l), Real(0.5))};
    }

    Box affine_ball_conv(const Box& s, const GraphNode& nd) {
        const Var& w = b.param(nd.weight);
        Var c = op::conv2d(s.c, w, nd.bias >= 0 ? std::optional<Var>(b.param(nd.bias)) : std::nullopt, nd.conv);
        Var ones = tape().constant(Tensor(s.c.shape(), Real(1)));
        Var r = op::scale(op::sqrt(op::conv2d(ones, op::mul(w, w), std::nullopt, nd.conv)), eps);
        return {c, r};
    }

    Box affine_ball_linear(const Box& s, const GraphNode& nd) {
        const Var& w = b.param(nd.weight);
        Var c = op::linear(s.c, w, nd.bias >= 0 ? std::optional<Var>(b.param(nd.bias)) : std::nullopt);
        Var ones = tape().constant(Tensor(s.c.shape(), Real(1)));
        Var r = op::scale(op::sqrt(op::linear(ones, op::mul(w, w), std::nullopt)), eps);
        return {c, r};
    }

    Box node(const GraphNode& nd, std::vector<Box> in, std::size_t n) {
        auto opt = [&](int idx) { return idx >= 0 ? std::optional<Var>(b.param(idx)) : std::nullopt; };
        switch (nd.kind) {
            case NodeKind::input: throw Error("bounds: unexpected input node");
            case NodeKind::conv: {
                if (!in[0].r) return affine_ball_conv(in[0], nd);
                const Var& w = b.param(nd.weight);
                return {op::conv2d(in[0].c, w, opt(nd.bias), nd.conv),
                        op::conv2d(*in[0].r, op::abs(w), std::nullopt, nd.conv)};
            }
            case NodeKind::linear: {
                if (!in[0].r) return affine_ball_linear(in[0], nd);
                const Var& w = b.param(nd.weight);
                return {op::linear(in[0].c, w, opt(nd.bias)), op::linear(*in[0].r, op::abs(w), std::nullopt)};
            }
            case NodeKind::batchnorm: {
                Box s = to_box(in[0]);
                auto [scale, shift] = b.bn_affine(nd.bn);
                return {op::channel_affine(s.c, scale, shift), op::channel_affine(*s.r, op::abs(scale), std::nullopt)};
            }
            case NodeKind::relu: {
                Box s = to_box(in[0]);
                Var l = op::sub(s.c, *s.r), u = op::add(s.c, *s.r);
                if (opts.substitution_depth <= 0) return from_lu(op::relu(l), op::relu(u));
                Tensor lambda(l.shape());
                for (std::size_t i = 0; i < lambda.size(); ++i) {
                    const Real lv = l.value()[i], uv = u.value()[i];
                    lambda[i] = (lv >= 0 || (uv > 0 && uv >= -lv)) ? Real(1) : Real(0);
                }
                return from_lu(op::mul_const(l, lambda), op::relu(u));
            }
            case NodeKind::tanh: {
                Box s = to_box(in[0]);
                return from_lu(op::tanh(op::sub(s.c, *s.r)), op::tanh(op::add(s.c, *s.r)));
            }
            case NodeKind::max_pool: {
                Box s = to_box(in[0]);
                return from_lu(op::max_pool2d(op::sub(s.c, *s.r), nd.pool), op::max_pool2d(op::add(s.c, *s.r), nd.pool));
            }
            case NodeKind::avg_pool: {
                Box s = to_box(in[0]);
                return {op::avg_pool2d(s.c, nd.pool), op::avg_pool2d(*s.r, nd.pool)};
            }
            case NodeKind::global_avg_pool: {
                Box s = to_box(in[0]);
                return {op::global_avg_pool(s.c), op::global_avg_pool(*s.r)};
            }
            case NodeKind::flatten: {
                const Shape sh = batch_shape(n, nd.shape);
                if (!in[0].r) return {op::reshape(in[0].c, sh), std::nullopt};
                return {op::reshape(in[0].c, sh), op::reshape(*in[0].r, sh)};
            }
            case NodeKind::add: {
                Box acc = to_box(in[0]);
                for (std::size_t k = 1; k < in.size(); ++k) {
                    Box s = to_box(in[k]);
                    acc = {op::add(acc.c, s.c), op::add(*acc.r, *s.r)};
                }
                return acc;
            }
            case NodeKind::concat: {
                std::vector<Var> cs, rs;
                for (auto& s0 : in) {
                    Box s = to_box(s0);
                    cs.push_back(s.c);
                    rs.push_back(*s.r);
                }
                if (cs.size() == 1) return {cs[0], rs[0]};
                return {op::concat_channels(cs), op::concat_channels(rs)};
            }
            case NodeKind::mixed: {
                if (in.empty()) {
                    Var z = tape().constant(Tensor(batch_shape(n, nd.shape)));
                    return {z, z};
                }
                std::vector<Var> cs, rs;
                for (auto& s0 : in) {
                    Box s = to_box(s0);
                    cs.push_back(s.c);
                    rs.push_back(*s.r);
                }
                Var w = b.mix_row(nd.arch, nd.arch_row);
                return {op::weighted_sum(cs, w, nd.cols), op::weighted_sum(rs, w, nd.cols)};
            }
        }
        throw Error("bounds: unknown node kind");
    }

    // Boxes of every node except `stop` and what only it needs.
    std::vector<Box> run(const Tensor& x, Norm norm, int stop) {
        const Model& m = b.model();
        if (!(eps >= 0) || !std::isfinite(eps)) throw Error("bounds: eps must be finite and non-negative");
        const std::size_t n = x.dim(0);
        std::vector<Box> s(m.nodes.size());
        for (std::size_t i = 0; i < m.nodes.size(); ++i) {
            if (static_cast<int>(i) == stop) continue;
            const GraphNode& nd = m.nodes[i];
            if (nd.kind == NodeKind::input) {
                Var c = tape().constant(x);
                s[i] = norm == Norm::linf ? Box{c, tape().constant(Tensor(x.shape(), eps))} : Box{c, std::nullopt};
                continue;
            }
            std::vector<Box> in;
            for (int k : nd.inputs) in.push_back(s[static_cast<std::size_t>(k)]);
            s[i] = node(nd, std::move(in), n);
        }
        return s;
    }
};

void check_batch(const Model& m, const Tensor& x) {
    if (x.rank() != m.input_shape.size() + 1 || !std::equal(m.input_shape.begin(), m.input_shape.end(), x.shape().begin() + 1))
        throw ShapeError("bounds: input " + shape_str(x.shape()) + " does not match N x " + shape_str(m.input_shape));
}

}  // namespace

IntervalVars propagate_bounds(Binding& b, const Tensor& x, Real eps, Norm norm, const BoundOptions& opts) {
    check_batch(b.model(), x);
    Interp it{b, eps, opts};
    auto s = it.run(x, norm, -1);
    Box out = it.to_box(s[static_cast<std::size_t>(b.model().output)]);
    IntervalVars iv{op::sub(out.c, *out.r), op::add(out.c, *out.r)};
    return iv;
}

Var margin_bounds(Binding& b, const Tensor& x, const std::vector<std::size_t>& labels, Real eps, Norm norm,
                  const BoundOptions& opts) {
    const Model& m = b.model();
    check_batch(m, x);
    if (labels.size() != x.dim(0)) throw ShapeError("margin_bounds: label count mismatch");
    const GraphNode& out = m.nodes.at(static_cast<std::size_t>(m.output));
    Interp it{b, eps, opts};
    if (out.kind == NodeKind::linear) {
        auto s = it.run(x, norm, m.output);
        const Box& z = s[static_cast<std::size_t>(out.inputs[0])];
        std::optional<Var> bias = out.bias >= 0 ? std::optional<Var>(b.param(out.bias)) : std::nullopt;
        if (!z.r) return op::affine_margin_lower(z.c, std::nullopt, eps, 2, b.param(out.weight), bias, labels);
        return op::affine_margin_lower(z.c, z.r, 0, 1, b.param(out.weight), bias, labels);
    }
    auto s = it.run(x, norm, -1);
    Box o = it.to_box(s[static_cast<std::size_t>(m.output)]);
    if (o.c.shape().size() != 2) throw ShapeError("margin_bounds: model output is not N x K");
    if (o.c.shape()[1] < 2) throw ShapeError("margin_bounds: need at least two classes");
    return op::interval_margin(op::sub(o.c, *o.r), op::add(o.c, *o.r), labels);
}

Real margin_lower_bound(const IntervalBounds& logits, std::size_t row, std::size_t label) {
    require_same_shape(logits.lower, logits.upper, "margin_lower_bound");
    if (logits.lower.rank() != 2) throw ShapeError("margin_lower_bound expects N x K bounds");
    const std::size_t k = logits.lower.dim(1);
    if (k < 2) throw ShapeError("margin_lower_bound: need at least two classes");
    if (label >= k) throw ShapeError("margin_lower_bound: label out of range");
    Real worst = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < k; ++j)
        if (j != label) worst = std::max(worst, logits.upper[row * k + j]);
    return logits.lower[row * k + label] - worst;
}

CbMetric cb_metric(Binding& b, const Tensor& x, const std::vector<std::size_t>& labels, Real eps, Norm norm,
                   Real temperature, const BoundOptions& opts) {
    if (x.dim(0) == 0) throw Error("cb_metric: empty batch");
    Var margins = margin_bounds(b, x, labels, eps, norm, opts);
    Var per = temperature > 0 ? op::softmin_rows(margins, temperature) : op::min_rows(margins);
    const Tensor& mv = margins.value();
    const std::size_t n = mv.dim(0), k = mv.dim(1);
    Real hard = 0;
    for (std::size_t i = 0; i < n; ++i) hard += *std::min_element(mv.ptr() + i * k, mv.ptr() + (i + 1) * k);
    return {op::mean(per), hard / static_cast<Real>(n)};
}

Real adapt_epsilon(Real eps_prev, Real margin, Real step, Real eps_min) {
    if (margin > 0) return eps_prev + step;
    return std::max(eps_min, eps_prev - step);
}

CertifiedRadius certify_radius(const Model& model, const Tensor& x, std::size_t label, Norm norm, Real tol,
                               const BoundOptions& opts, Real eps_cap) {
    if (!(tol > 0)) throw Error("certify_radius: tolerance must be positive");
    if (x.dim(0) != 1) throw ShapeError("certify_radius expects a single example");
    CertifiedRadius res{0, norm, tol};
    if (argmax_rows(predict_logits(model, x))[0] != label) return res;

    auto certified = [&](Real eps) {
        Tape t;
        Binding b(t, model, {false, false});
        const Tensor& m = margin_bounds(b, x, {label}, eps, norm, opts).value();
        if (!m.all_finite()) throw NumericError("certify_radius: non-finite bound");
        return *std::min_element(m.ptr(), m.ptr() + m.size()) >= 0;
    };
    if (!certified(0)) return res;
    Real lo = 0, hi = Real(1) / 64;
    while (certified(hi)) {
        lo = hi;
        if (hi >= eps_cap) {
            res.value = lo;
            return res;
        }
        hi = std::min(hi * 2, eps_cap);
    }
    for (int it = 0; it < 30 && hi - lo > tol; ++it) {
        const Real mid = (lo + hi) / 2;
        (certified(mid) ? lo : hi) = mid;
    }
    res.value = lo;
    return res;
}

}  // namespace robnas
