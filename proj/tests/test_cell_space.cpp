#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "robnas/cell_space.hpp"
#include "robnas/gradcheck.hpp"

using namespace robnas;

namespace {

SpaceConfig small_space() {
    SpaceConfig c;
    c.cells = 2;
    c.intermediate_nodes = 2;
    c.channels = 4;
    c.image_hw = 6;
    c.classes = 3;
    c.reduction_cells = {1};
    return c;
}

Tensor eval_out(const Model& m, const Tensor& x, BnMode mode = BnMode::eval) {
    Tape t;
    Binding b(t, m, {false, false});
    return forward(b, t.constant(x), mode).value();
}

void randomize_alpha(Model& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& a : m.arch) a.alpha = rng.normal_tensor(a.alpha.shape());
}

}  // namespace

TEST_CASE("op tags round trip") {
    for (OpTag t : kAllOps) CHECK(parse_op_tag(op_tag_name(t)) == t);
    CHECK_THROWS_AS(parse_op_tag("conv_7x7"), ConfigError);
}

TEST_CASE("supernet construction") {
    SUBCASE("edge count for two intermediate nodes") {
        SpaceConfig c;
        c.ops = {OpTag::identity, OpTag::zero};
        CHECK(num_edges(2) == 5);
        Model m = build_supernet(c, 1);
        REQUIRE(m.arch.size() == 1);
        CHECK(m.arch[0].alpha.dim(0) == 5);
        CHECK(m.arch[0].alpha.dim(1) == 2);
        CHECK(edge_row(0, 0) == 0);
        CHECK(edge_row(0, 1) == 1);
        CHECK(edge_row(1, 0) == 2);
        CHECK(edge_row(1, 2) == 4);
    }
    SUBCASE("zero alpha gives uniform mixing") {
        Model m = build_supernet(small_space(), 1);
        Tape t;
        Binding b(t, m);
        const Tensor& w = b.mix_row(0, 3).value();
        for (std::size_t k = 0; k < w.size(); ++k) CHECK(w[k] == doctest::Approx(1.0 / 7).epsilon(1e-15));
    }
    SUBCASE("same seed gives bit-identical weights") {
        Model a = build_supernet(small_space(), 42), b = build_supernet(small_space(), 42);
        Model c = build_supernet(small_space(), 43);
        REQUIRE(a.params.size() == b.params.size());
        bool differs = false;
        for (std::size_t i = 0; i < a.params.size(); ++i) {
            CHECK(a.params[i] == b.params[i]);
            differs = differs || !(a.params[i] == c.params[i]);
        }
        CHECK(differs);
    }
    SUBCASE("output has one logit per class") {
        SpaceConfig c = small_space();
        Model m = build_supernet(c, 3);
        Rng rng(5);
        Tensor x = rng.uniform_tensor({4, 1, 6, 6}, 0, 1);
        CHECK(eval_out(m, x).shape() == Shape{4, 3});
        CHECK(eval_out(m, x, BnMode::train).shape() == Shape{4, 3});
    }
    SUBCASE("invalid configurations") {
        SpaceConfig c;
        c.ops = {};
        CHECK_THROWS_AS(build_supernet(c, 1), ConfigError);
        c = SpaceConfig{};
        c.channels = 0;
        CHECK_THROWS_AS(build_supernet(c, 1), ConfigError);
        c = SpaceConfig{};
        c.intermediate_nodes = 0;
        CHECK_THROWS_AS(build_supernet(c, 1), ConfigError);
        c = SpaceConfig{};
        c.reduction_cells = {3};
        CHECK_THROWS_AS(build_supernet(c, 1), ConfigError);
    }
}

TEST_CASE("mixed edge forward") {
    const Shape in{2, 5, 5};
    Rng rng(9);
    Tensor x = rng.uniform_tensor(batch_shape(3, in), -1, 1);

    SUBCASE("saturated alpha on identity returns the input") {
        Model m = single_edge_model(in, {OpTag::sep_conv_3x3, OpTag::avg_pool_3x3, OpTag::identity, OpTag::zero}, 1);
        m.arch[0].alpha[2] = 30;
        CHECK(max_abs_diff(eval_out(m, x), x) < 1e-9);
    }
    SUBCASE("identity and zero at equal weight halve the input") {
        Model m = single_edge_model(in, {OpTag::identity, OpTag::zero}, 1);
        CHECK(max_abs_diff(eval_out(m, x), x * Real(0.5)) < 1e-15);
    }
    SUBCASE("one-hot mixing equals the single op") {
        for (OpTag op : {OpTag::sep_conv_3x3, OpTag::sep_conv_5x5, OpTag::dil_conv_3x3, OpTag::dil_conv_5x5,
                         OpTag::max_pool_3x3, OpTag::avg_pool_3x3}) {
            CAPTURE(op_tag_name(op));
            Model mixed = single_edge_model(in, {op, OpTag::identity}, 4);
            Model single = single_edge_model(in, {op}, 4);
            mixed.arch[0].alpha[0] = 40;
            CHECK(max_abs_diff(eval_out(mixed, x), eval_out(single, x)) < 1e-9);
        }
    }
    SUBCASE("stride 2 halves the spatial size on every candidate") {
        for (OpTag op : kAllOps) {
            if (op == OpTag::zero) continue;
            Model m = single_edge_model(in, {op}, 2, 2);
            CHECK(eval_out(m, x).shape() == Shape{3, 2, 3, 3});
        }
    }
    SUBCASE("alpha gradient matches finite differences") {
        Model m = single_edge_model(in, {OpTag::sep_conv_3x3, OpTag::dil_conv_3x3, OpTag::avg_pool_3x3,
                                         OpTag::identity, OpTag::zero},
                                    7);
        randomize_alpha(m, 3);
        Tensor r = rng.uniform_tensor(eval_out(m, x).shape(), -1, 1);
        Tape t;
        Binding b(t, m, {false, true});
        Var y = forward(b, t.constant(x), BnMode::eval);
        Tensor g = t.backward(op::sum(op::mul_const(y, r)))[b.alpha(0)];
        Tensor fd = numeric_gradient(
            [&](const std::vector<Tensor>& p) {
                Model c = m;
                c.arch[0].alpha = p[0];
                Tensor out = eval_out(c, x);
                Real s = 0;
                for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
                return s;
            },
            {m.arch[0].alpha}, 1e-5)[0];
        CHECK(max_rel_error({g}, {fd}) < 1e-5);
    }
}

TEST_CASE("supernet output does not depend on edge storage order") {
    SpaceConfig c = small_space();
    c.intermediate_nodes = 3;
    const std::vector<std::size_t> order{3, 1, 4, 0, 2};
    Model a = build_supernet(c, 11);
    Model p = build_supernet(c, 99, &order);
    REQUIRE(a.params.size() == p.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        const int j = p.params.find(a.params.name(i));
        REQUIRE(j >= 0);
        p.params[static_cast<std::size_t>(j)] = a.params[i];
    }
    randomize_alpha(a, 4);
    for (std::size_t t = 0; t < a.arch.size(); ++t) p.arch[t].alpha = a.arch[t].alpha;
    Rng rng(2);
    Tensor x = rng.uniform_tensor({3, 1, 6, 6}, 0, 1);
    CHECK(max_abs_diff(eval_out(a, x), eval_out(p, x)) < 1e-9);
    CHECK(max_abs_diff(eval_out(a, x, BnMode::train), eval_out(p, x, BnMode::train)) < 1e-9);
}

TEST_CASE("derivation") {
    SUBCASE("identity beats zero whatever the zero weight") {
        ArchTable t{"normal", {"identity", "zero"}, Tensor({2, 2})};
        t.alpha[0] = std::log(0.6);
        t.alpha[1] = std::log(0.4);
        t.alpha[2] = std::log(0.1);
        t.alpha[3] = std::log(0.9);
        auto edges = derive_cell(t, 1, 2);
        REQUIRE(edges.size() == 2);
        for (const auto& e : edges) CHECK(e.op == OpTag::identity);
    }
    SUBCASE("keeps the strongest edges and best non-zero op") {
        std::vector<std::string> ops{"sep_conv_3x3", "avg_pool_3x3", "identity", "zero"};
        ArchTable t{"normal", ops, Tensor({5, 4})};
        auto set = [&](std::size_t row, std::size_t col, Real v) { t.alpha[row * 4 + col] = v; };
        // node 0: edges 0,1 (both kept)
        set(0, 1, 2);
        set(1, 0, 1);
        // node 1: edges from 0,1,2 at rows 2,3,4; from=2 and from=0 strongest
        set(2, 2, 3);
        set(3, 3, 10);  // zero dominates but does not count
        set(4, 0, 2);
        auto e = derive_cell(t, 2, 2);
        REQUIRE(e.size() == 4);
        CHECK(e[0] == GenotypeEdge{0, 0, OpTag::avg_pool_3x3});
        CHECK(e[1] == GenotypeEdge{0, 1, OpTag::sep_conv_3x3});
        CHECK(e[2] == GenotypeEdge{1, 0, OpTag::identity});
        CHECK(e[3] == GenotypeEdge{1, 2, OpTag::sep_conv_3x3});
    }
    SUBCASE("ties resolve by op order") {
        ArchTable t{"normal", {"avg_pool_3x3", "sep_conv_3x3", "zero"}, Tensor({2, 3})};
        auto e = derive_cell(t, 1, 1);
        REQUIRE(e.size() == 1);
        CHECK(e[0].from == 0);
        CHECK(e[0].op == OpTag::sep_conv_3x3);
    }
    SUBCASE("row shifts leave the cell unchanged") {
        SpaceConfig c = small_space();
        c.intermediate_nodes = 3;
        Model m = build_supernet(c, 1);
        randomize_alpha(m, 8);
        Genotype g = derive_architecture(m, 3, 2);
        Rng rng(1);
        for (auto& a : m.arch)
            for (std::size_t r = 0; r < a.alpha.dim(0); ++r) {
                const Real s = rng.uniform(-20, 20);
                for (std::size_t k = 0; k < a.alpha.dim(1); ++k) a.alpha[r * a.alpha.dim(1) + k] += s;
            }
        CHECK(derive_architecture(m, 3, 2) == g);
        for (const auto& e : g.normal) CHECK(e.op != OpTag::zero);
        CHECK(g.normal.size() == 6);
        CHECK(g.reduce.size() == 6);
    }
    SUBCASE("too few incoming edges") {
        ArchTable t{"normal", {"identity", "zero"}, Tensor({2, 2})};
        CHECK_THROWS_AS(derive_cell(t, 1, 3), ConfigError);
        CHECK_THROWS_AS(derive_cell(t, 2, 2), ShapeError);
    }
}

TEST_CASE("genotype exchange and discrete network") {
    SpaceConfig c = small_space();
    Model m = build_supernet(c, 1);
    randomize_alpha(m, 2);
    Genotype g = derive_architecture(m, c.intermediate_nodes, c.edges_per_node);

    auto path = std::filesystem::temp_directory_path() / "robnas_test_genotype.json";
    g.save(path);
    CHECK(Genotype::load(path) == g);
    CHECK(Genotype::from_json(g.to_json()) == g);
    std::filesystem::remove(path);

    auto bad = g.to_json();
    bad["normal"][0]["op_tag"] = "zero";
    CHECK_THROWS_AS(Genotype::from_json(bad), ConfigError);
    bad = g.to_json();
    bad["normal"][0]["from"] = 7;
    CHECK_THROWS_AS(Genotype::from_json(bad), ConfigError);
    CHECK_THROWS_AS(Genotype::from_json(nlohmann::json::object()), ConfigError);

    Model d = build_discrete(g, c, 5);
    CHECK(d.arch.empty());
    CHECK(d.params.numel() < m.params.numel());
    Rng rng(3);
    CHECK(eval_out(d, rng.uniform_tensor({2, 1, 6, 6}, 0, 1)).shape() == Shape{2, 3});
}
