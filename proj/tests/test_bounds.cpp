#include <cmath>

#include "doctest.h"
#include "robnas/bounds.hpp"
#include "robnas/cell_space.hpp"
#include "robnas/gradcheck.hpp"

using namespace robnas;

namespace {

IntervalBounds logit_bounds(const Model& m, const Tensor& x, Real eps, Norm norm, BoundOptions opts = {}) {
    Tape t;
    Binding b(t, m, {false, false});
    auto iv = propagate_bounds(b, x, eps, norm, opts);
    return {iv.lower.value(), iv.upper.value()};
}

Tensor margins(const Model& m, const Tensor& x, const std::vector<std::size_t>& y, Real eps, Norm norm,
               BoundOptions opts = {}) {
    Tape t;
    Binding b(t, m, {false, false});
    return margin_bounds(b, x, y, eps, norm, opts).value();
}

void perturb_bn_stats(Model& m, Rng& rng) {
    for (auto& bn : m.bns) {
        bn.running_mean = rng.uniform_tensor(bn.running_mean.shape(), -0.5, 0.5);
        bn.running_var = rng.uniform_tensor(bn.running_var.shape(), 0.3, 2);
        auto& g = m.params[static_cast<std::size_t>(bn.gamma)];
        auto& b = m.params[static_cast<std::size_t>(bn.beta)];
        g = rng.uniform_tensor(g.shape(), -1.5, 1.5);
        b = rng.uniform_tensor(b.shape(), -0.5, 0.5);
    }
}

Model mlp(std::uint64_t seed, std::size_t d = 6, std::size_t h = 8, std::size_t k = 3) {
    GraphBuilder gb({d}, seed);
    int z = gb.linear(gb.input(), h);
    z = gb.relu(z);
    z = gb.linear(z, h);
    z = gb.relu(z);
    return gb.finish(gb.linear(z, k), k);
}

Model tiny_supernet(std::uint64_t seed, std::vector<OpTag> ops = SpaceConfig{}.ops) {
    SpaceConfig c;
    c.cells = 2;
    c.intermediate_nodes = 2;
    c.channels = 3;
    c.image_hw = 4;
    c.classes = 3;
    c.reduction_cells = {1};
    c.ops = std::move(ops);
    Model m = build_supernet(c, seed);
    Rng rng(seed + 100);
    for (auto& a : m.arch) a.alpha = rng.normal_tensor(a.alpha.shape());
    perturb_bn_stats(m, rng);
    return m;
}

// Sampled perturbation with ||e||_p <= eps; every tenth sample sits on a vertex/sphere.
Tensor sample_perturbation(Rng& rng, const Shape& shape, Real eps, Norm norm, bool boundary) {
    const std::size_t n = shape_numel(shape);
    if (norm == Norm::linf) {
        Tensor e = rng.uniform_tensor(shape, -eps, eps);
        if (boundary)
            for (std::size_t i = 0; i < n; ++i) e[i] = e[i] >= 0 ? eps : -eps;
        return e;
    }
    Tensor dir = rng.unit_sphere(n);
    const Real rad = boundary ? eps : eps * std::pow(rng.uniform(), Real(1) / static_cast<Real>(n));
    return (dir * rad).reshaped(shape);
}

void check_containment(const Model& m, const Tensor& x0, std::size_t label, Real eps, Norm norm, int samples,
                       std::uint64_t seed) {
    const IntervalBounds bd = logit_bounds(m, x0, eps, norm);
    const Tensor mg = margins(m, x0, {label}, eps, norm);
    const Real cert = *std::min_element(mg.ptr(), mg.ptr() + mg.size());
    Rng rng(seed);
    const std::size_t batch = 250;
    int outside = 0, flipped = 0;
    const std::size_t k = bd.lower.size();
    for (int done = 0; done < samples; done += static_cast<int>(batch)) {
        Tensor xs(batch_shape(batch, m.input_shape));
        const std::size_t d = x0.size();
        for (std::size_t s = 0; s < batch; ++s) {
            Tensor e = sample_perturbation(rng, {d}, eps, norm, s % 10 == 0);
            for (std::size_t i = 0; i < d; ++i) xs[s * d + i] = x0[i] + e[i];
        }
        Tensor out = predict_logits(m, xs);
        auto pred = argmax_rows(out);
        for (std::size_t s = 0; s < batch; ++s) {
            for (std::size_t j = 0; j < k; ++j) {
                const Real v = out[s * k + j];
                if (v < bd.lower[j] - 1e-9 || v > bd.upper[j] + 1e-9) ++outside;
            }
            if (cert > 0 && pred[s] != label) ++flipped;
        }
    }
    CHECK(outside == 0);
    CHECK(flipped == 0);
}

}  // namespace

TEST_CASE("block linear bounds examples") {
    SUBCASE("batch norm with unit statistics and zero eps") {
        auto lb = batchnorm_linear_bounds(Tensor::vector({1}), Tensor::vector({0}), Tensor::vector({0}),
                                          Tensor::vector({1}), 0);
        CHECK(lb.A_L[0] == 1);
        CHECK(lb.A_U[0] == 1);
        CHECK(lb.B_L[0] == 0);
        CHECK(lb.B_U[0] == 0);
    }
    SUBCASE("batch norm gamma 2 mean 1 var 3 eps 1") {
        auto lb = batchnorm_linear_bounds(Tensor::vector({2}), Tensor::vector({0}), Tensor::vector({1}),
                                          Tensor::vector({3}), 1);
        CHECK(lb.A_L[0] == doctest::Approx(1).epsilon(1e-15));
        CHECK(lb.B_L[0] == doctest::Approx(-1).epsilon(1e-15));
        CHECK(lb.A_U[0] == lb.A_L[0]);
        CHECK(lb.B_U[0] == lb.B_L[0]);
    }
    SUBCASE("relu stable cases") {
        auto pos = relu_linear_bounds(Tensor::vector({1}), Tensor::vector({3}));
        CHECK(pos.A_L[0] == 1);
        CHECK(pos.A_U[0] == 1);
        CHECK(pos.B_L[0] == 0);
        CHECK(pos.B_U[0] == 0);
        auto neg = relu_linear_bounds(Tensor::vector({-3}), Tensor::vector({-1}));
        CHECK(neg.A_L[0] == 0);
        CHECK(neg.A_U[0] == 0);
        CHECK(neg.B_L[0] == 0);
        CHECK(neg.B_U[0] == 0);
    }
    SUBCASE("relu triangle envelope") {
        auto lb = relu_linear_bounds(Tensor::vector({-1, -3}), Tensor::vector({3, 1}));
        CHECK(lb.A_U[0] == doctest::Approx(0.75));
        CHECK(lb.B_U[0] == doctest::Approx(0.75));
        CHECK(lb.A_L[0] == 1);
        CHECK(lb.A_L[3] == 0);
        CHECK(lb.A_U[3] == doctest::Approx(0.25));
        // envelope holds on a grid
        for (int i = 0; i <= 100; ++i) {
            const Real z = -1 + 4 * i / 100.0;
            CHECK(lb.A_L[0] * z + lb.B_L[0] <= std::max(z, Real(0)) + 1e-12);
            CHECK(lb.A_U[0] * z + lb.B_U[0] >= std::max(z, Real(0)) - 1e-12);
        }
    }
    SUBCASE("invalid interval") {
        CHECK_THROWS(relu_linear_bounds(Tensor::vector({1}), Tensor::vector({0})));
        CHECK_THROWS_AS(batchnorm_linear_bounds(Tensor::vector({1}), Tensor::vector({0}), Tensor::vector({0}),
                                                Tensor::vector({0}), 0),
                        NumericError);
    }
}

TEST_CASE("dense block bounds on a relu-conv-bn block") {
    GraphBuilder gb({2, 4, 4}, 3);
    const int r = gb.relu(gb.input());
    const int dw = gb.conv(r, 2, 3, {1, 1, 1, 2}, false);
    const int pw = gb.conv(dw, 3, 1, {}, false);
    const int bn = gb.batchnorm(pw);
    Model m = gb.finish(bn, 0);
    Rng rng(4);
    perturb_bn_stats(m, rng);
    m.params[static_cast<std::size_t>(m.bns[0].gamma)] = rng.uniform_tensor({3}, -2, 2);

    Tensor x = rng.uniform_tensor({1, 2, 4, 4}, -1, 1);
    const Real eps = 0.3;
    IntervalBounds box{x.reshaped({32}) - Tensor({32}, eps), x.reshaped({32}) + Tensor({32}, eps)};

    SUBCASE("single affine block after relu equals the depth-one interpreter") {
        GraphBuilder g2({2, 4, 4}, 5);
        const int r2 = g2.relu(g2.input());
        const int c2 = g2.conv(r2, 3, 3, {1, 1, 1, 1}, true);
        const int b2 = g2.batchnorm(c2);
        Model m2 = g2.finish(b2, 0);
        perturb_bn_stats(m2, rng);
        IntervalBounds dense = concretize(block_bounds(m2, {r2, c2, b2}, box), box);
        IntervalBounds interp = logit_bounds(m2, x, eps, Norm::linf, {1});
        CHECK(max_abs_diff(dense.lower, interp.lower.reshaped({interp.lower.size()})) < 1e-12);
        CHECK(max_abs_diff(dense.upper, interp.upper.reshaped({interp.upper.size()})) < 1e-12);
    }
    SUBCASE("composition through two convolutions is at least as tight and sound") {
        LinearBounds lb = block_bounds(m, {r, dw, pw, bn}, box);
        IntervalBounds dense = concretize(lb, box);
        IntervalBounds interp = logit_bounds(m, x, eps, Norm::linf, {1});
        for (std::size_t i = 0; i < dense.lower.size(); ++i) {
            CHECK(dense.lower[i] >= interp.lower[i] - 1e-12);
            CHECK(dense.upper[i] <= interp.upper[i] + 1e-12);
        }
        for (int s = 0; s < 500; ++s) {
            Tensor z = x + rng.uniform_tensor(x.shape(), -eps, eps);
            Tensor y = predict_logits(m, z);
            Tensor zf = z.reshaped({32});
            for (std::size_t i = 0; i < y.size(); ++i) {
                Real lo = lb.B_L[i], hi = lb.B_U[i];
                for (std::size_t j = 0; j < 32; ++j) {
                    lo += lb.A_L[i * 32 + j] * zf[j];
                    hi += lb.A_U[i * 32 + j] * zf[j];
                }
                CHECK(lo <= y[i] + 1e-9);
                CHECK(hi >= y[i] - 1e-9);
            }
        }
    }
    SUBCASE("affine nodes are exact") {
        LinearBounds lb = block_bounds(m, {dw, pw, bn}, box);
        CHECK(lb.A_L == lb.A_U);
        CHECK(lb.B_L == lb.B_U);
    }
    SUBCASE("errors") {
        CHECK_THROWS(block_bounds(m, {r, pw}, box));
        IntervalBounds bad{box.upper, box.lower};
        CHECK_THROWS(block_bounds(m, {r}, bad));
    }
}

TEST_CASE("interval propagation examples") {
    SUBCASE("identity network") {
        Model m = single_edge_model({1}, {OpTag::identity}, 1);
        auto b = logit_bounds(m, Tensor({1, 1}, 0.5), 0.1, Norm::linf);
        CHECK(b.lower[0] == doctest::Approx(0.4).epsilon(1e-15));
        CHECK(b.upper[0] == doctest::Approx(0.6).epsilon(1e-15));
    }
    SUBCASE("zero radius reproduces the forward pass") {
        Model m = tiny_supernet(2);
        Rng rng(1);
        Tensor x = rng.uniform_tensor({3, 1, 4, 4}, 0, 1);
        Tensor f = predict_logits(m, x);
        for (Norm n : {Norm::linf, Norm::l2}) {
            auto b = logit_bounds(m, x, 0, n);
            CHECK(max_abs_diff(b.lower, f) < 1e-9);
            CHECK(max_abs_diff(b.upper, f) < 1e-9);
            Tensor mg = margins(m, x, {0, 1, 2}, 0, n);
            for (std::size_t i = 0; i < 3; ++i) {
                std::size_t c = 0;
                for (std::size_t k = 0; k < 3; ++k) {
                    if (k == i) continue;
                    CHECK(mg[i * 2 + c] == doctest::Approx(f[i * 3 + i] - f[i * 3 + k]).epsilon(1e-9));
                    ++c;
                }
            }
        }
    }
    SUBCASE("margin lower bound from logit intervals") {
        IntervalBounds b{Tensor({1, 3}, std::vector<Real>{2, -5, -5}), Tensor({1, 3}, std::vector<Real>{9, 1, 0.5})};
        CHECK(margin_lower_bound(b, 0, 0) == 1);
        CHECK_THROWS(margin_lower_bound({Tensor({1, 1}), Tensor({1, 1})}, 0, 0));
        CHECK_THROWS(margin_lower_bound(b, 0, 3));
    }
    SUBCASE("errors") {
        Model m = mlp(1);
        CHECK_THROWS(logit_bounds(m, Tensor({1, 6}), -0.1, Norm::linf));
        CHECK_THROWS_AS(logit_bounds(m, Tensor({1, 5}), 0.1, Norm::linf), ShapeError);
        CHECK(parse_norm("inf") == Norm::linf);
        CHECK(parse_norm("2") == Norm::l2);
        CHECK_THROWS_AS(parse_norm("l1"), ConfigError);
    }
}

TEST_CASE("soundness against sampled perturbations") {
    SUBCASE("two-layer network, linf and l2") {
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
            Model m = mlp(seed);
            Rng rng(seed);
            Tensor x = rng.uniform_tensor({1, 6}, -1, 1);
            const std::size_t y = argmax_rows(predict_logits(m, x))[0];
            check_containment(m, x, y, 0.05, Norm::linf, 10000, seed);
            check_containment(m, x, y, 0.1, Norm::l2, 10000, seed + 7);
        }
    }
    SUBCASE("supernet with every candidate op") {
        std::vector<OpTag> ops(kAllOps.begin(), kAllOps.end());
        Model m = tiny_supernet(5, ops);
        Rng rng(6);
        Tensor x = rng.uniform_tensor({1, 1, 4, 4}, 0, 1);
        const std::size_t y = argmax_rows(predict_logits(m, x))[0];
        check_containment(m, x, y, 0.01, Norm::linf, 10000, 1);
        check_containment(m, x, y, 0.03, Norm::l2, 10000, 2);
    }
    SUBCASE("depth one relaxation is also sound") {
        Model m = mlp(9);
        Rng rng(2);
        Tensor x = rng.uniform_tensor({1, 6}, -1, 1);
        IntervalBounds b = logit_bounds(m, x, 0.1, Norm::linf, {1});
        for (int s = 0; s < 2000; ++s) {
            Tensor y = predict_logits(m, x + rng.uniform_tensor(x.shape(), -0.1, 0.1));
            for (std::size_t i = 0; i < y.size(); ++i) {
                CHECK(y[i] >= b.lower[i] - 1e-9);
                CHECK(y[i] <= b.upper[i] + 1e-9);
            }
        }
    }
}

TEST_CASE("monotonicity in the radius") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Model m = seed % 2 ? mlp(seed) : tiny_supernet(seed);
        Rng rng(seed + 50);
        Tensor x = seed % 2 ? rng.uniform_tensor({1, 6}, -1, 1) : rng.uniform_tensor({1, 1, 4, 4}, 0, 1);
        const Norm n = seed % 4 < 2 ? Norm::linf : Norm::l2;
        Tensor prev_w, prev_m;
        for (Real eps : {0.0, 0.005, 0.01, 0.02, 0.05, 0.1}) {
            IntervalBounds b = logit_bounds(m, x, eps, n);
            Tensor w = b.upper - b.lower;
            Tensor mg = margins(m, x, {0}, eps, n);
            if (!prev_w.empty()) {
                for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] >= prev_w[i] - 1e-12);
                for (std::size_t i = 0; i < mg.size(); ++i) CHECK(mg[i] <= prev_m[i] + 1e-12);
            }
            prev_w = w;
            prev_m = mg;
        }
    }
}

TEST_CASE("certified-bound metric") {
    Model m = tiny_supernet(3);
    Rng rng(8);
    Tensor x = rng.uniform_tensor({4, 1, 4, 4}, 0, 1);
    const std::vector<std::size_t> y{0, 1, 2, 1};
    const Real eps = 0.01;

    auto metric_value = [&](const Model& mm, const Tensor& xx, const std::vector<std::size_t>& yy, Norm n) {
        Tape t;
        Binding b(t, mm, {false, false});
        return cb_metric(b, xx, yy, eps, n, 50).value.value().item();
    };

    SUBCASE("single example on the identity network equals its margin") {
        GraphBuilder gb({2}, 1);
        Model id = gb.finish(gb.linear(gb.input(), 2, false), 2);
        id.params[0] = Tensor({2, 2}, std::vector<Real>{1, 0, 0, 1});
        Tensor xi({1, 2}, std::vector<Real>{0.8, 0.3});
        Tape t;
        Binding b(t, id, {false, false});
        CbMetric c = cb_metric(b, xi, {0}, 0.1, Norm::linf, 0);
        CHECK(c.value.value().item() == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(c.mean_hard_margin == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("duplicating the batch leaves the metric unchanged") {
        Tensor xx(Shape{8, 1, 4, 4});
        for (std::size_t i = 0; i < 2; ++i) std::copy(x.ptr(), x.ptr() + x.size(), xx.ptr() + i * x.size());
        std::vector<std::size_t> yy = y;
        yy.insert(yy.end(), y.begin(), y.end());
        CHECK(metric_value(m, xx, yy, Norm::linf) == doctest::Approx(metric_value(m, x, y, Norm::linf)).epsilon(1e-12));
    }
    SUBCASE("gradients match central differences") {
        for (Norm n : {Norm::linf, Norm::l2}) {
            CAPTURE(norm_name(n));
            Tape t;
            Binding b(t, m);
            Var v = cb_metric(b, x, y, eps, n, 50).value;
            Gradients g = t.backward(v);
            std::vector<Tensor> analytic{g[b.alpha(0)], g[b.alpha(1)]};
            auto fd = numeric_gradient(
                [&](const std::vector<Tensor>& p) {
                    Model c = m;
                    c.arch[0].alpha = p[0];
                    c.arch[1].alpha = p[1];
                    return metric_value(c, x, y, n);
                },
                {m.arch[0].alpha, m.arch[1].alpha}, 1e-6);
            CHECK(max_rel_error(analytic, fd) < 1e-4);

            // a stem and a head weight
            for (int pi : {0, static_cast<int>(m.params.size()) - 2}) {
                Tensor ga = g[b.param(pi)];
                auto fdw = numeric_gradient(
                    [&](const std::vector<Tensor>& p) {
                        Model c = m;
                        c.params[static_cast<std::size_t>(pi)] = p[0];
                        return metric_value(c, x, y, n);
                    },
                    {m.params[static_cast<std::size_t>(pi)]}, 1e-6);
                CHECK(max_rel_error({ga}, fdw) < 1e-4);
            }
        }
    }
    SUBCASE("empty batch") {
        Tape t;
        Binding b(t, m);
        CHECK_THROWS(cb_metric(b, Tensor({0, 1, 4, 4}), {}, eps, Norm::linf, 50));
    }
}

TEST_CASE("epsilon schedule") {
    CHECK(adapt_epsilon(0.03, 0.2) == doctest::Approx(0.035).epsilon(1e-15));
    CHECK(adapt_epsilon(0.03, -0.2) == doctest::Approx(0.025).epsilon(1e-15));
    CHECK(adapt_epsilon(1e-4, -1) == 1e-4);
    CHECK(adapt_epsilon(0.002, -1) == 1e-4);
    Real e = 0.03;
    for (int i = 0; i < 50; ++i) {
        const Real next = adapt_epsilon(e, i % 2 ? 1 : -1);
        CHECK(std::abs(next - 0.03) <= 0.005 + 1e-12);
        e = next;
    }
}

TEST_CASE("certified radius") {
    SUBCASE("linear classifier matches the closed form") {
        const std::size_t d = 5, k = 4;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            GraphBuilder gb({d}, seed);
            Model m = gb.finish(gb.linear(gb.input(), k, false), k);
            Rng rng(seed);
            Tensor x = rng.uniform_tensor({1, d}, -1, 1);
            const std::size_t y = argmax_rows(predict_logits(m, x))[0];
            const Tensor& w = m.params[0];
            Real r2 = 1e300, rinf = 1e300;
            for (std::size_t j = 0; j < k; ++j) {
                if (j == y) continue;
                Real dot = 0, n2 = 0, n1 = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    const Real a = w[y * d + i] - w[j * d + i];
                    dot += a * x[i];
                    n2 += a * a;
                    n1 += std::abs(a);
                }
                r2 = std::min(r2, dot / std::sqrt(n2));
                rinf = std::min(rinf, dot / n1);
            }
            const Real tol = 1e-5;
            CertifiedRadius c2 = certify_radius(m, x, y, Norm::l2, tol);
            CertifiedRadius ci = certify_radius(m, x, y, Norm::linf, tol);
            CHECK(std::abs(c2.value - r2) <= tol);
            CHECK(std::abs(ci.value - rinf) <= tol);
            CHECK(c2.value <= r2 + 1e-12);
            CHECK(c2.tolerance == tol);
            CHECK(c2.norm == Norm::l2);
            // misclassified label
            CHECK(certify_radius(m, x, (y + 1) % k, Norm::l2, tol).value == 0);
        }
    }
    SUBCASE("returned radius re-certifies") {
        Model m = tiny_supernet(4);
        Rng rng(3);
        Tensor x = rng.uniform_tensor({1, 1, 4, 4}, 0, 1);
        const std::size_t y = argmax_rows(predict_logits(m, x))[0];
        const Real tol = 1e-4;
        CertifiedRadius c = certify_radius(m, x, y, Norm::linf, tol);
        CHECK(c.value > 0);
        Tensor mg = margins(m, x, {y}, std::max(Real(0), c.value - tol), Norm::linf);
        for (std::size_t i = 0; i < mg.size(); ++i) CHECK(mg[i] >= 0);
        CHECK_THROWS(certify_radius(m, x, y, Norm::linf, 0));
    }
}
