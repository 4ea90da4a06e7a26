#pragma once

// A model is a DAG of typed nodes over a parameter store. The same graph is
// read by three interpreters: the plain forward pass (this header), the
// interval-bound pass (bounds.hpp) and the primal+tangent pass used for
// Jacobian-vector products.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "robnas/checkpoint.hpp"
#include "robnas/ops.hpp"
#include "robnas/rng.hpp"

namespace robnas {

enum class NodeKind {
    input,
    conv,
    batchnorm,
    relu,
    tanh,
    max_pool,
    avg_pool,
    global_avg_pool,
    flatten,
    linear,
    add,
    mixed,
    concat,
};

std::string_view node_kind_name(NodeKind k);

struct GraphNode {
    NodeKind kind = NodeKind::input;
    std::vector<int> inputs;
    Shape shape;  // per example
    int weight = -1;
    int bias = -1;
    op::ConvAttrs conv{};
    op::PoolAttrs pool{};
    int bn = -1;
    // mixed: inputs[i] is weighted by softmax(arch[arch].alpha row arch_row)[cols[i]]
    int arch = -1;
    std::size_t arch_row = 0;
    std::vector<std::size_t> cols;
};

struct BatchNormState {
    int gamma = -1;
    int beta = -1;
    Tensor running_mean;
    Tensor running_var;
    Real eps = 1e-5;
    Real momentum = 0.1;
};

/// Architecture logits: one row per mixed edge, one column per candidate op.
struct ArchTable {
    std::string name;
    std::vector<std::string> ops;
    Tensor alpha;
};

class ParamStore {
public:
    int add(std::string name, Tensor value);
    std::size_t size() const { return values_.size(); }
    Tensor& operator[](std::size_t i) { return values_.at(i); }
    const Tensor& operator[](std::size_t i) const { return values_.at(i); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    int find(std::string_view name) const;
    std::vector<Tensor>& values() { return values_; }
    const std::vector<Tensor>& values() const { return values_; }
    std::size_t numel() const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
};

struct Model {
    std::vector<GraphNode> nodes;
    int output = -1;
    Shape input_shape;
    std::size_t num_classes = 0;
    ParamStore params;
    std::vector<BatchNormState> bns;
    std::vector<ArchTable> arch;

    /// Weights, BN running statistics and architecture logits by name.
    TensorFile to_tensors() const;
    /// Inverse of to_tensors(); every entry of this model must be present.
    void load_tensors(const TensorFile& file);
};

/// Appends nodes in topological order and initializes their parameters.
class GraphBuilder {
public:
    GraphBuilder(Shape input_shape, std::uint64_t seed);

    int input() const { return 0; }
    const Shape& shape(int node) const { return model_.nodes.at(static_cast<std::size_t>(node)).shape; }

    /// Parameter names are "<scope>/<kind><k>" with k counting within the scope,
    /// so names do not depend on how many nodes precede the scope.
    void set_scope(std::string scope);
    const std::string& scope() const { return scope_; }

    int conv(int in, std::size_t out_channels, std::size_t kernel, op::ConvAttrs attrs = {}, bool bias = true);
    int batchnorm(int in);
    int relu(int in);
    int tanh(int in);
    int max_pool(int in, op::PoolAttrs attrs);
    int avg_pool(int in, op::PoolAttrs attrs);
    int global_avg_pool(int in);
    int flatten(int in);
    int linear(int in, std::size_t out_features, bool bias = true);
    int add(std::vector<int> ins);
    int concat(std::vector<int> ins);

    int arch_table(std::string name, std::size_t rows, std::vector<std::string> ops);
    /// `ins` may be empty (all candidates were zero ops), in which case the
    /// node's value is zero with the given per-example shape.
    int mixed(std::vector<int> ins, int table, std::size_t row, std::vector<std::size_t> cols, Shape shape);

    Model finish(int output, std::size_t num_classes);
    Model& model() { return model_; }
    Rng& rng() { return rng_; }

private:
    int push(GraphNode n);
    std::string pname(std::string_view what);

    Model model_;
    Rng rng_;
    std::string scope_;
    std::size_t scope_count_ = 0;
};

struct BindOptions {
    bool weight_grad = true;
    bool arch_grad = true;
};

/// Leaf vars for a model's weights and architecture logits on one tape.
class Binding {
public:
    Binding(Tape& tape, const Model& model, BindOptions opts = {});

    Tape& tape() const { return *tape_; }
    const Model& model() const { return *model_; }

    const Var& param(int i) const { return params_.at(static_cast<std::size_t>(i)); }
    const std::vector<Var>& params() const { return params_; }
    const Var& alpha(int table) const { return alphas_.at(static_cast<std::size_t>(table)); }
    const std::vector<Var>& alphas() const { return alphas_; }

    /// Softmax mixing weights of one arch row (cached).
    Var mix_row(int table, std::size_t row);
    /// Eval-mode batch norm as (scale, shift) per channel, differentiable in gamma and beta.
    std::pair<Var, Var> bn_affine(int bn);

private:
    Tape* tape_;
    const Model* model_;
    std::vector<Var> params_;
    std::vector<Var> alphas_;
    std::vector<std::optional<Var>> softmax_;
    std::vector<std::vector<std::optional<Var>>> rows_;
    std::vector<std::optional<std::pair<Var, Var>>> bn_;
};

enum class BnMode { train, eval };

struct BnBatchStats {
    Tensor mean;
    Tensor var;  // biased
    std::size_t count = 0;
};

/// x is N x input_shape. Train mode normalizes with batch statistics and, when
/// `stats` is given, reports them per BN layer for a later running-stat update.
Var forward(Binding& b, const Var& x, BnMode mode, std::vector<BnBatchStats>* stats = nullptr);

/// Applies a single node to already computed input values.
Var apply_node(Binding& b, int node, const std::vector<Var>& inputs, BnMode mode, std::vector<BnBatchStats>* stats,
               std::size_t batch);

/// Running stats follow r <- (1 - m) r + m s, with the unbiased batch variance.
void update_running_stats(Model& model, const std::vector<BnBatchStats>& stats);

struct Dual {
    Var primal;
    Var tangent;
};

/// Eval-mode forward pass carrying a tangent: returns f(x) and J_f(x) t.
Dual forward_tangent(Binding& b, const Var& x, const Var& t);

/// Eval-mode logits without recording gradients.
Tensor predict_logits(const Model& model, const Tensor& x);
std::vector<std::size_t> argmax_rows(const Tensor& logits);
Real accuracy(const Model& model, const Tensor& x, const std::vector<std::size_t>& labels, std::size_t batch = 256);

/// Rows [begin, end) of an N x ... tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
/// Selected rows of an N x ... tensor.
Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows);
/// Prepends a batch dimension of `n`.
Shape batch_shape(std::size_t n, const Shape& per_example);

}  // namespace robnas
