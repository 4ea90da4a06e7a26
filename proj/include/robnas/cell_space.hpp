#pragma once

// DARTS-style cell search space: a supernet whose edges mix every candidate op
// through softmax(alpha), and the discrete network built from a derived genotype.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "robnas/model.hpp"

namespace robnas {

enum class OpTag { sep_conv_3x3, sep_conv_5x5, dil_conv_3x3, dil_conv_5x5, max_pool_3x3, avg_pool_3x3, identity, zero };

inline constexpr std::array<OpTag, 8> kAllOps{OpTag::sep_conv_3x3, OpTag::sep_conv_5x5, OpTag::dil_conv_3x3,
                                              OpTag::dil_conv_5x5, OpTag::max_pool_3x3, OpTag::avg_pool_3x3,
                                              OpTag::identity,     OpTag::zero};

std::string_view op_tag_name(OpTag t);
/// Throws ConfigError for unknown names.
OpTag parse_op_tag(std::string_view name);

enum class CellOutput { concat, sum };

struct SpaceConfig {
    std::size_t cells = 1;
    std::size_t intermediate_nodes = 2;
    std::size_t channels = 8;
    std::size_t in_channels = 1;
    std::size_t image_hw = 8;
    std::size_t classes = 10;
    std::size_t edges_per_node = 2;
    std::vector<OpTag> ops{OpTag::sep_conv_3x3, OpTag::sep_conv_5x5, OpTag::dil_conv_3x3, OpTag::dil_conv_5x5,
                           OpTag::avg_pool_3x3, OpTag::identity,     OpTag::zero};
    std::vector<std::size_t> reduction_cells;
    CellOutput output = CellOutput::concat;

    void validate() const;
};

/// Edges into intermediate node i come from the two cell inputs and nodes < i.
std::size_t num_edges(std::size_t intermediate_nodes);
std::size_t edge_row(std::size_t node, std::size_t from);

/// Appends one candidate op reading from `from`; returns -1 for the zero op.
int add_candidate_op(GraphBuilder& gb, int from, OpTag op, std::size_t stride);

/// Appends every candidate of `ops` on `from` plus the mixed node over them.
int add_mixed_edge(GraphBuilder& gb, int from, const std::vector<OpTag>& ops, std::size_t stride, int table,
                   std::size_t row);

/// Full supernet. Arch tables are "normal" and, with reduction cells, "reduce";
/// alpha starts at zero. `edge_order` optionally permutes the order in which the
/// edges of every node are appended (the model's semantics do not depend on it).
Model build_supernet(const SpaceConfig& cfg, std::uint64_t seed, const std::vector<std::size_t>* edge_order = nullptr);

/// One mixed edge on an input of per-example shape `in_shape`, as a model whose
/// output is the mixed node.
Model single_edge_model(const Shape& in_shape, const std::vector<OpTag>& ops, std::uint64_t seed,
                        std::size_t stride = 1);

struct GenotypeEdge {
    std::size_t node = 0;
    std::size_t from = 0;
    OpTag op = OpTag::identity;
    bool operator==(const GenotypeEdge&) const = default;
};

struct Genotype {
    std::size_t intermediate_nodes = 0;
    std::vector<GenotypeEdge> normal;
    std::vector<GenotypeEdge> reduce;

    bool operator==(const Genotype&) const = default;

    nlohmann::json to_json() const;
    static Genotype from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Genotype load(const std::filesystem::path& path);
};

/// Kept edges for one cell kind: per node, the `edges_per_node` incoming edges
/// with the largest non-zero mixing weight, each with its best non-zero op.
std::vector<GenotypeEdge> derive_cell(const ArchTable& table, std::size_t intermediate_nodes,
                                      std::size_t edges_per_node);
Genotype derive_architecture(const Model& supernet, std::size_t intermediate_nodes, std::size_t edges_per_node);

/// Discrete network with the supernet's macro layout and `cfg.cells` cells.
Model build_discrete(const Genotype& g, const SpaceConfig& cfg, std::uint64_t seed);

}  // namespace robnas
