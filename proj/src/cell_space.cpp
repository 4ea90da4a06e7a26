#include "robnas/cell_space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>

namespace robnas {

std::string_view op_tag_name(OpTag t) {
    switch (t) {
        case OpTag::sep_conv_3x3: return "sep_conv_3x3";
        case OpTag::sep_conv_5x5: return "sep_conv_5x5";
        case OpTag::dil_conv_3x3: return "dil_conv_3x3";
        case OpTag::dil_conv_5x5: return "dil_conv_5x5";
        case OpTag::max_pool_3x3: return "max_pool_3x3";
        case OpTag::avg_pool_3x3: return "avg_pool_3x3";
        case OpTag::identity: return "identity";
        case OpTag::zero: return "zero";
    }
    return "?";
}

OpTag parse_op_tag(std::string_view name) {
    for (OpTag t : kAllOps)
        if (op_tag_name(t) == name) return t;
    throw ConfigError("unknown op tag '" + std::string(name) + "'");
}

void SpaceConfig::validate() const {
    if (cells == 0) throw ConfigError("space: cells must be >= 1");
    if (intermediate_nodes == 0) throw ConfigError("space: intermediate_nodes must be >= 1");
    if (channels == 0 || in_channels == 0) throw ConfigError("space: channels must be >= 1");
    if (image_hw == 0) throw ConfigError("space: image_hw must be >= 1");
    if (classes < 2) throw ConfigError("space: classes must be >= 2");
    if (edges_per_node == 0 || edges_per_node > 2) throw ConfigError("space: edges_per_node must be 1 or 2");
    if (ops.empty()) throw ConfigError("space: ops subset is empty");
    for (std::size_t i = 0; i < ops.size(); ++i)
        for (std::size_t j = i + 1; j < ops.size(); ++j)
            if (ops[i] == ops[j]) throw ConfigError("space: duplicate op '" + std::string(op_tag_name(ops[i])) + "'");
    for (auto r : reduction_cells)
        if (r >= cells) throw ConfigError("space: reduction cell index out of range");
}

std::size_t num_edges(std::size_t intermediate_nodes) {
    std::size_t e = 0;
    for (std::size_t i = 0; i < intermediate_nodes; ++i) e += 2 + i;
    return e;
}

std::size_t edge_row(std::size_t node, std::size_t from) { return node * (node + 3) / 2 + from; }

int add_candidate_op(GraphBuilder& gb, int from, OpTag op, std::size_t stride) {
    const std::size_t c = gb.shape(from).at(0);
    switch (op) {
        case OpTag::sep_conv_3x3:
        case OpTag::sep_conv_5x5: {
            const std::size_t k = op == OpTag::sep_conv_3x3 ? 3 : 5;
            int x = from;
            for (std::size_t stage = 0; stage < 2; ++stage) {
                x = gb.relu(x);
                x = gb.conv(x, c, k, {stage == 0 ? stride : 1, k / 2, 1, c});
                x = gb.conv(x, c, 1);
                x = gb.batchnorm(x);
            }
            return x;
        }
        case OpTag::dil_conv_3x3:
        case OpTag::dil_conv_5x5: {
            const std::size_t k = op == OpTag::dil_conv_3x3 ? 3 : 5;
            int x = gb.relu(from);
            x = gb.conv(x, c, k, {stride, k - 1, 2, c});
            x = gb.conv(x, c, 1);
            return gb.batchnorm(x);
        }
        case OpTag::max_pool_3x3: return gb.max_pool(from, {3, stride, 1});
        case OpTag::avg_pool_3x3: return gb.avg_pool(from, {3, stride, 1});
        case OpTag::identity: {
            if (stride == 1) return from;
            int x = gb.relu(from);
            x = gb.conv(x, c, 1, {stride, 0, 1, 1});
            return gb.batchnorm(x);
        }
        case OpTag::zero: return -1;
    }
    throw ConfigError("unsupported op tag");
}

namespace {

Shape strided_shape(const Shape& s, std::size_t stride) {
    if (stride == 1) return s;
    return {s[0], (s[1] - 1) / stride + 1, (s[2] - 1) / stride + 1};
}

}  // namespace

int add_mixed_edge(GraphBuilder& gb, int from, const std::vector<OpTag>& ops, std::size_t stride, int table,
                   std::size_t row) {
    const std::string base = gb.scope();
    std::vector<int> ins;
    std::vector<std::size_t> cols;
    for (std::size_t k = 0; k < ops.size(); ++k) {
        gb.set_scope(base + "/" + std::string(op_tag_name(ops[k])));
        const int out = add_candidate_op(gb, from, ops[k], stride);
        if (out < 0) continue;
        ins.push_back(out);
        cols.push_back(k);
    }
    gb.set_scope(base + "/mix");
    return gb.mixed(std::move(ins), table, row, std::move(cols), strided_shape(gb.shape(from), stride));
}

namespace {

using EdgeFn = std::function<int(std::size_t node, std::size_t from, int src, std::size_t stride)>;

int relu_conv_bn(GraphBuilder& gb, int in, std::size_t channels, std::size_t stride) {
    int x = gb.relu(in);
    x = gb.conv(x, channels, 1, {stride, 0, 1, 1});
    return gb.batchnorm(x);
}

// Builds one cell; `froms[i]` lists the input states of intermediate node i.
int build_cell(GraphBuilder& gb, const std::string& name, int s0, int s1, std::size_t channels, bool reduction,
               bool prev_reduction, const std::vector<std::vector<std::size_t>>& froms, CellOutput output,
               const EdgeFn& edge) {
    gb.set_scope(name + "/pre0");
    const int p0 = relu_conv_bn(gb, s0, channels, prev_reduction ? 2 : 1);
    gb.set_scope(name + "/pre1");
    const int p1 = relu_conv_bn(gb, s1, channels, 1);
    if (gb.shape(p0) != gb.shape(p1)) throw ShapeError("cell inputs disagree in shape after preprocessing");
    std::vector<int> states{p0, p1};
    std::vector<int> inter;
    for (std::size_t i = 0; i < froms.size(); ++i) {
        std::vector<int> outs;
        for (std::size_t j : froms[i]) {
            gb.set_scope(name + "/e" + std::to_string(edge_row(i, j)));
            const std::size_t stride = reduction && j < 2 ? 2 : 1;
            const int o = edge(i, j, states.at(j), stride);
            if (o >= 0) outs.push_back(o);
        }
        if (outs.empty()) throw ShapeError("intermediate node without incoming edges");
        gb.set_scope(name + "/n" + std::to_string(i));
        const int node = outs.size() == 1 ? outs[0] : gb.add(outs);
        states.push_back(node);
        inter.push_back(node);
    }
    gb.set_scope(name + "/out");
    if (output == CellOutput::sum) return inter.size() == 1 ? inter[0] : gb.add(inter);
    return gb.conv(inter.size() == 1 ? inter[0] : gb.concat(inter), channels, 1);
}

template <class CellFn>
Model build_macro(const SpaceConfig& cfg, GraphBuilder& gb, CellFn&& cell) {
    gb.set_scope("stem");
    int x = gb.conv(gb.input(), cfg.channels, 3, {1, 1, 1, 1});
    x = gb.batchnorm(x);
    int s0 = x, s1 = x;
    bool prev_red = false;
    std::size_t c = cfg.channels;
    for (std::size_t k = 0; k < cfg.cells; ++k) {
        const bool red =
            std::find(cfg.reduction_cells.begin(), cfg.reduction_cells.end(), k) != cfg.reduction_cells.end();
        if (red) c *= 2;
        const int out = cell("cell" + std::to_string(k), s0, s1, c, red, prev_red);
        s0 = s1;
        s1 = out;
        prev_red = red;
    }
    gb.set_scope("head");
    const int logits = gb.linear(gb.global_avg_pool(s1), cfg.classes);
    return gb.finish(logits, cfg.classes);
}

}  // namespace

Model build_supernet(const SpaceConfig& cfg, std::uint64_t seed, const std::vector<std::size_t>* edge_order) {
    cfg.validate();
    GraphBuilder gb({cfg.in_channels, cfg.image_hw, cfg.image_hw}, seed);
    std::vector<std::string> names;
    for (OpTag t : cfg.ops) names.emplace_back(op_tag_name(t));
    const std::size_t rows = num_edges(cfg.intermediate_nodes);
    const int normal = gb.arch_table("normal", rows, names);
    const int reduce = cfg.reduction_cells.empty() ? -1 : gb.arch_table("reduce", rows, names);

    std::vector<std::vector<std::size_t>> froms(cfg.intermediate_nodes);
    for (std::size_t i = 0; i < froms.size(); ++i) {
        if (edge_order) {
            for (std::size_t j : *edge_order)
                if (j < 2 + i) froms[i].push_back(j);
            if (froms[i].size() != 2 + i) throw Error("edge_order is not a permutation of the node inputs");
        } else {
            for (std::size_t j = 0; j < 2 + i; ++j) froms[i].push_back(j);
        }
    }
    return build_macro(cfg, gb, [&](const std::string& name, int s0, int s1, std::size_t c, bool red, bool prev) {
        const int table = red ? reduce : normal;
        return build_cell(gb, name, s0, s1, c, red, prev, froms, cfg.output,
                          [&](std::size_t i, std::size_t j, int src, std::size_t stride) {
                              return add_mixed_edge(gb, src, cfg.ops, stride, table, edge_row(i, j));
                          });
    });
}

Model single_edge_model(const Shape& in_shape, const std::vector<OpTag>& ops, std::uint64_t seed, std::size_t stride) {
    GraphBuilder gb(in_shape, seed);
    std::vector<std::string> names;
    for (OpTag t : ops) names.emplace_back(op_tag_name(t));
    const int table = gb.arch_table("edge", 1, names);
    gb.set_scope("edge");
    const int out = add_mixed_edge(gb, gb.input(), ops, stride, table, 0);
    return gb.finish(out, 0);
}

// ---------------------------------------------------------------- genotype

nlohmann::json Genotype::to_json() const {
    auto edges = [](const std::vector<GenotypeEdge>& es) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& e : es) a.push_back({{"node", e.node}, {"from", e.from}, {"op_tag", op_tag_name(e.op)}});
        return a;
    };
    return {{"format", "robnas-genotype/1"},
            {"intermediate_nodes", intermediate_nodes},
            {"normal", edges(normal)},
            {"reduce", edges(reduce)}};
}

Genotype Genotype::from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "robnas-genotype/1") throw ConfigError("not a genotype document");
        Genotype g;
        g.intermediate_nodes = j.at("intermediate_nodes").get<std::size_t>();
        auto edges = [&](const nlohmann::json& a) {
            std::vector<GenotypeEdge> out;
            for (const auto& e : a) {
                GenotypeEdge ge{e.at("node").get<std::size_t>(), e.at("from").get<std::size_t>(),
                                parse_op_tag(e.at("op_tag").get<std::string>())};
                if (ge.node >= g.intermediate_nodes || ge.from >= 2 + ge.node)
                    throw ConfigError("genotype edge (" + std::to_string(ge.node) + ", " + std::to_string(ge.from) +
                                      ") is outside the cell");
                if (ge.op == OpTag::zero) throw ConfigError("genotype contains a zero op");
                out.push_back(ge);
            }
            return out;
        };
        g.normal = edges(j.at("normal"));
        g.reduce = edges(j.value("reduce", nlohmann::json::array()));
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed genotype: ") + e.what());
    }
}

void Genotype::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write '" + path.string() + "'");
    os << to_json().dump(2) << "\n";
}

Genotype Genotype::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open genotype '" + path.string() + "'");
    try {
        return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed genotype: ") + e.what());
    }
}

std::vector<GenotypeEdge> derive_cell(const ArchTable& table, std::size_t intermediate_nodes,
                                      std::size_t edges_per_node) {
    if (table.alpha.rank() != 2 || table.alpha.dim(0) != num_edges(intermediate_nodes))
        throw ShapeError("architecture table rows do not cover the cell's edges");
    const std::size_t cols = table.alpha.dim(1);
    std::vector<OpTag> tags;
    for (const auto& n : table.ops) tags.push_back(parse_op_tag(n));
    // columns in fixed op-tag order, for tie-breaking
    std::vector<std::size_t> order(cols);
    for (std::size_t k = 0; k < cols; ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return tags[a] < tags[b]; });

    std::vector<GenotypeEdge> out;
    for (std::size_t i = 0; i < intermediate_nodes; ++i) {
        const std::size_t n_in = 2 + i;
        if (n_in < edges_per_node) throw ConfigError("node has fewer incoming edges than edges_per_node");
        struct Cand {
            std::size_t from;
            Real score;
            OpTag op;
        };
        std::vector<Cand> cands;
        for (std::size_t j = 0; j < n_in; ++j) {
            const std::size_t r = edge_row(i, j);
            const Real* a = table.alpha.ptr() + r * cols;
            const Real mx = *std::max_element(a, a + cols);
            Real z = 0;
            for (std::size_t k = 0; k < cols; ++k) z += std::exp(a[k] - mx);
            Real best = -1;
            std::size_t best_k = cols;
            for (std::size_t k : order) {
                if (tags[k] == OpTag::zero) continue;
                const Real w = std::exp(a[k] - mx) / z;
                if (w > best) {
                    best = w;
                    best_k = k;
                }
            }
            if (best_k == cols) throw ConfigError("op set has no non-zero candidate");
            cands.push_back({j, best, tags[best_k]});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
        cands.resize(edges_per_node);
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.from < b.from; });
        for (const auto& c : cands) out.push_back({i, c.from, c.op});
    }
    return out;
}

Genotype derive_architecture(const Model& supernet, std::size_t intermediate_nodes, std::size_t edges_per_node) {
    Genotype g;
    g.intermediate_nodes = intermediate_nodes;
    for (const auto& t : supernet.arch) {
        if (t.name == "normal") g.normal = derive_cell(t, intermediate_nodes, edges_per_node);
        else if (t.name == "reduce") g.reduce = derive_cell(t, intermediate_nodes, edges_per_node);
    }
    if (g.normal.empty()) throw Error("supernet has no normal architecture table");
    return g;
}

Model build_discrete(const Genotype& g, const SpaceConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (g.intermediate_nodes == 0 || g.normal.empty()) throw ConfigError("genotype is empty");
    auto froms_of = [&](const std::vector<GenotypeEdge>& es) {
        std::vector<std::vector<std::size_t>> f(g.intermediate_nodes);
        for (const auto& e : es) f.at(e.node).push_back(e.from);
        return f;
    };
    auto op_of = [&](const std::vector<GenotypeEdge>& es, std::size_t node, std::size_t from) {
        for (const auto& e : es)
            if (e.node == node && e.from == from) return e.op;
        throw ConfigError("genotype edge lookup failed");
    };
    GraphBuilder gb({cfg.in_channels, cfg.image_hw, cfg.image_hw}, seed);
    return build_macro(cfg, gb, [&](const std::string& name, int s0, int s1, std::size_t c, bool red, bool prev) {
        const auto& es = red && !g.reduce.empty() ? g.reduce : g.normal;
        return build_cell(gb, name, s0, s1, c, red, prev, froms_of(es), cfg.output,
                          [&](std::size_t i, std::size_t j, int src, std::size_t stride) {
                              return add_candidate_op(gb, src, op_of(es, i, j), stride);
                          });
    });
}

}  // namespace robnas
