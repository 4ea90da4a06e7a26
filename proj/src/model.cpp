#include "robnas/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace robnas {

std::string_view node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::input: return "input";
        case NodeKind::conv: return "conv";
        case NodeKind::batchnorm: return "batchnorm";
        case NodeKind::relu: return "relu";
        case NodeKind::tanh: return "tanh";
        case NodeKind::max_pool: return "max_pool";
        case NodeKind::avg_pool: return "avg_pool";
        case NodeKind::global_avg_pool: return "global_avg_pool";
        case NodeKind::flatten: return "flatten";
        case NodeKind::linear: return "linear";
        case NodeKind::add: return "add";
        case NodeKind::mixed: return "mixed";
        case NodeKind::concat: return "concat";
    }
    return "?";
}

// ---------------------------------------------------------------- ParamStore

int ParamStore::add(std::string name, Tensor value) {
    if (find(name) >= 0) throw Error("duplicate parameter name '" + name + "'");
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size() - 1);
}

int ParamStore::find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    return -1;
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

TensorFile Model::to_tensors() const {
    TensorFile f;
    for (std::size_t i = 0; i < params.size(); ++i) f.tensors.push_back({params.name(i), params[i]});
    for (std::size_t i = 0; i < bns.size(); ++i) {
        f.tensors.push_back({"bn/" + std::to_string(i) + "/running_mean", bns[i].running_mean});
        f.tensors.push_back({"bn/" + std::to_string(i) + "/running_var", bns[i].running_var});
    }
    for (const auto& a : arch) f.tensors.push_back({"arch/" + a.name, a.alpha});
    return f;
}

void Model::load_tensors(const TensorFile& file) {
    auto fetch = [&](const std::string& name, Tensor& dst) {
        const Tensor& src = file.at(name);
        if (src.shape() != dst.shape())
            throw FormatError("checkpoint entry '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                              shape_str(dst.shape()));
        dst = src;
    };
    for (std::size_t i = 0; i < params.size(); ++i) fetch(params.name(i), params[i]);
    for (std::size_t i = 0; i < bns.size(); ++i) {
        fetch("bn/" + std::to_string(i) + "/running_mean", bns[i].running_mean);
        fetch("bn/" + std::to_string(i) + "/running_var", bns[i].running_var);
    }
    for (auto& a : arch) fetch("arch/" + a.name, a.alpha);
}

// ---------------------------------------------------------------- GraphBuilder

GraphBuilder::GraphBuilder(Shape input_shape, std::uint64_t seed) : rng_(seed, "weights") {
    if (input_shape.empty()) throw ShapeError("model input shape is empty");
    model_.input_shape = input_shape;
    GraphNode in;
    in.kind = NodeKind::input;
    in.shape = std::move(input_shape);
    model_.nodes.push_back(std::move(in));
}

int GraphBuilder::push(GraphNode n) {
    for (int i : n.inputs)
        if (i < 0 || i >= static_cast<int>(model_.nodes.size())) throw Error("graph input refers to a later node");
    model_.nodes.push_back(std::move(n));
    return static_cast<int>(model_.nodes.size() - 1);
}

void GraphBuilder::set_scope(std::string scope) {
    scope_ = std::move(scope);
    scope_count_ = 0;
}

std::string GraphBuilder::pname(std::string_view what) {
    std::string s = scope_.empty() ? std::string() : scope_ + "/";
    return s + std::string(what) + std::to_string(scope_count_++);
}

int GraphBuilder::conv(int in, std::size_t out_channels, std::size_t kernel, op::ConvAttrs attrs, bool bias) {
    const Shape& s = shape(in);
    if (s.size() != 3) throw ShapeError("conv expects a C x H x W input, got " + shape_str(s));
    if (attrs.groups == 0 || s[0] % attrs.groups || out_channels % attrs.groups)
        throw ShapeError("conv groups do not divide the channel counts");
    const std::size_t cin_g = s[0] / attrs.groups;
    const auto fan_in = static_cast<Real>(cin_g * kernel * kernel);
    GraphNode n;
    n.kind = NodeKind::conv;
    n.inputs = {in};
    n.conv = attrs;
    n.shape = {out_channels, op::conv_out_extent(s[1], kernel, attrs), op::conv_out_extent(s[2], kernel, attrs)};
    const Real wb = std::sqrt(Real(6) / fan_in);
    n.weight = model_.params.add(pname("weight"), rng_.uniform_tensor({out_channels, cin_g, kernel, kernel}, -wb, wb));
    if (bias) {
        const Real bb = Real(1) / std::sqrt(fan_in);
        n.bias = model_.params.add(pname("bias"), rng_.uniform_tensor({out_channels}, -bb, bb));
    }
    return push(std::move(n));
}

int GraphBuilder::batchnorm(int in) {
    const Shape& s = shape(in);
    const std::size_t c = s.at(0);
    BatchNormState st;
    st.gamma = model_.params.add(pname("gamma"), Tensor(Shape{c}, Real(1)));
    st.beta = model_.params.add(pname("beta"), Tensor(Shape{c}));
    st.running_mean = Tensor(Shape{c});
    st.running_var = Tensor(Shape{c}, Real(1));
    model_.bns.push_back(std::move(st));
    GraphNode n;
    n.kind = NodeKind::batchnorm;
    n.inputs = {in};
    n.shape = s;
    n.bn = static_cast<int>(model_.bns.size() - 1);
    return push(std::move(n));
}

int GraphBuilder::relu(int in) {
    GraphNode n;
    n.kind = NodeKind::relu;
    n.inputs = {in};
    n.shape = shape(in);
    return push(std::move(n));
}

int GraphBuilder::tanh(int in) {
    GraphNode n;
    n.kind = NodeKind::tanh;
    n.inputs = {in};
    n.shape = shape(in);
    return push(std::move(n));
}

int GraphBuilder::max_pool(int in, op::PoolAttrs attrs) {
    const Shape& s = shape(in);
    if (s.size() != 3) throw ShapeError("max_pool expects a C x H x W input");
    GraphNode n;
    n.kind = NodeKind::max_pool;
    n.inputs = {in};
    n.pool = attrs;
    n.shape = {s[0], op::pool_out_extent(s[1], attrs), op::pool_out_extent(s[2], attrs)};
    return push(std::move(n));
}

int GraphBuilder::avg_pool(int in, op::PoolAttrs attrs) {
    const Shape& s = shape(in);
    if (s.size() != 3) throw ShapeError("avg_pool expects a C x H x W input");
    GraphNode n;
    n.kind = NodeKind::avg_pool;
    n.inputs = {in};
    n.pool = attrs;
    n.shape = {s[0], op::pool_out_extent(s[1], attrs), op::pool_out_extent(s[2], attrs)};
    return push(std::move(n));
}

int GraphBuilder::global_avg_pool(int in) {
    const Shape& s = shape(in);
    if (s.size() != 3) throw ShapeError("global_avg_pool expects a C x H x W input");
    GraphNode n;
    n.kind = NodeKind::global_avg_pool;
    n.inputs = {in};
    n.shape = {s[0]};
    return push(std::move(n));
}

int GraphBuilder::flatten(int in) {
    GraphNode n;
    n.kind = NodeKind::flatten;
    n.inputs = {in};
    n.shape = {shape_numel(shape(in))};
    return push(std::move(n));
}

int GraphBuilder::linear(int in, std::size_t out_features, bool bias) {
    const Shape& s = shape(in);
    if (s.size() != 1) throw ShapeError("linear expects a flat input, got " + shape_str(s));
    const auto fan_in = static_cast<Real>(s[0]);
    GraphNode n;
    n.kind = NodeKind::linear;
    n.inputs = {in};
    n.shape = {out_features};
    const Real wb = std::sqrt(Real(6) / fan_in);
    n.weight = model_.params.add(pname("weight"), rng_.uniform_tensor({out_features, s[0]}, -wb, wb));
    if (bias) {
        const Real bb = Real(1) / std::sqrt(fan_in);
        n.bias = model_.params.add(pname("bias"), rng_.uniform_tensor({out_features}, -bb, bb));
    }
    return push(std::move(n));
}

int GraphBuilder::add(std::vector<int> ins) {
    if (ins.empty()) throw ShapeError("add needs at least one input");
    for (int i : ins)
        if (shape(i) != shape(ins[0])) throw ShapeError("add inputs differ in shape");
    GraphNode n;
    n.kind = NodeKind::add;
    n.shape = shape(ins[0]);
    n.inputs = std::move(ins);
    return push(std::move(n));
}

int GraphBuilder::concat(std::vector<int> ins) {
    if (ins.empty()) throw ShapeError("concat needs at least one input");
    Shape s = shape(ins[0]);
    if (s.size() != 3) throw ShapeError("concat expects C x H x W inputs");
    s[0] = 0;
    for (int i : ins) {
        const Shape& t = shape(i);
        if (t.size() != 3 || t[1] != s[1] || t[2] != s[2]) throw ShapeError("concat inputs differ in spatial shape");
        s[0] += t[0];
    }
    GraphNode n;
    n.kind = NodeKind::concat;
    n.shape = std::move(s);
    n.inputs = std::move(ins);
    return push(std::move(n));
}

int GraphBuilder::arch_table(std::string name, std::size_t rows, std::vector<std::string> ops) {
    if (rows == 0 || ops.empty()) throw ShapeError("architecture table needs rows and ops");
    ArchTable t;
    t.name = std::move(name);
    t.alpha = Tensor(Shape{rows, ops.size()});
    t.ops = std::move(ops);
    model_.arch.push_back(std::move(t));
    return static_cast<int>(model_.arch.size() - 1);
}

int GraphBuilder::mixed(std::vector<int> ins, int table, std::size_t row, std::vector<std::size_t> cols, Shape shape) {
    const ArchTable& t = model_.arch.at(static_cast<std::size_t>(table));
    if (row >= t.alpha.dim(0)) throw ShapeError("mixed edge row out of range");
    if (ins.size() != cols.size()) throw ShapeError("mixed edge inputs and columns differ in length");
    for (std::size_t i = 0; i < ins.size(); ++i) {
        if (cols[i] >= t.ops.size()) throw ShapeError("mixed edge column out of range");
        if (this->shape(ins[i]) != shape)
            throw ShapeError("mixed edge candidate output " + shape_str(this->shape(ins[i])) + " differs from " +
                             shape_str(shape));
    }
    GraphNode n;
    n.kind = NodeKind::mixed;
    n.inputs = std::move(ins);
    n.arch = table;
    n.arch_row = row;
    n.cols = std::move(cols);
    n.shape = std::move(shape);
    return push(std::move(n));
}

Model GraphBuilder::finish(int output, std::size_t num_classes) {
    model_.output = output;
    model_.num_classes = num_classes;
    if (num_classes && shape(output) != Shape{num_classes})
        throw ShapeError("model output " + shape_str(shape(output)) + " does not have " + std::to_string(num_classes) +
                         " classes");
    return std::move(model_);
}

// ---------------------------------------------------------------- Binding

Binding::Binding(Tape& tape, const Model& model, BindOptions opts) : tape_(&tape), model_(&model) {
    for (const auto& p : model.params.values()) params_.push_back(tape.leaf(p, opts.weight_grad));
    for (const auto& a : model.arch) {
        alphas_.push_back(tape.leaf(a.alpha, opts.arch_grad));
        rows_.emplace_back(a.alpha.dim(0));
    }
    softmax_.resize(model.arch.size());
    bn_.resize(model.bns.size());
}

Var Binding::mix_row(int table, std::size_t row) {
    const auto t = static_cast<std::size_t>(table);
    auto& cached = rows_.at(t).at(row);
    if (cached) return *cached;
    if (!softmax_[t]) softmax_[t] = op::softmax_rows(alphas_[t]);
    const std::size_t cols = model_->arch[t].alpha.dim(1);
    std::vector<std::size_t> idx(cols);
    for (std::size_t j = 0; j < cols; ++j) idx[j] = row * cols + j;
    cached = op::gather(*softmax_[t], std::move(idx), Shape{cols});
    return *cached;
}

std::pair<Var, Var> Binding::bn_affine(int bn) {
    auto& cached = bn_.at(static_cast<std::size_t>(bn));
    if (cached) return *cached;
    const BatchNormState& st = model_->bns[static_cast<std::size_t>(bn)];
    if (!(st.eps > 0)) throw NumericError("batchnorm eps must be positive");
    Tensor inv(st.running_var.shape());
    for (std::size_t c = 0; c < inv.size(); ++c) {
        if (st.running_var[c] < 0) throw NumericError("negative running variance");
        inv[c] = Real(1) / std::sqrt(st.running_var[c] + st.eps);
    }
    Var scale = op::mul_const(param(st.gamma), inv);
    Var shift = op::sub(param(st.beta), op::mul_const(scale, st.running_mean));
    cached = std::make_pair(scale, shift);
    return *cached;
}

// ---------------------------------------------------------------- interpreters

namespace {

std::optional<Var> opt_param(Binding& b, int idx) {
    if (idx < 0) return std::nullopt;
    return b.param(idx);
}

void check_input(const Model& m, const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != m.input_shape.size() + 1 || !std::equal(m.input_shape.begin(), m.input_shape.end(), s.begin() + 1))
        throw ShapeError("model input " + shape_str(s) + " does not match N x " + shape_str(m.input_shape));
}

Tensor relu_mask(const Tensor& pre) {
    Tensor m(pre.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = pre[i] > 0 ? Real(1) : Real(0);
    return m;
}

}  // namespace

Var apply_node(Binding& b, int node, const std::vector<Var>& in, BnMode mode, std::vector<BnBatchStats>* stats,
               std::size_t batch) {
    const Model& m = b.model();
    const GraphNode& nd = m.nodes.at(static_cast<std::size_t>(node));
    if (in.size() != nd.inputs.size()) throw Error("apply_node: wrong number of inputs");
    switch (nd.kind) {
        case NodeKind::input: throw Error("apply_node: input nodes carry no computation");
        case NodeKind::conv: return op::conv2d(in[0], b.param(nd.weight), opt_param(b, nd.bias), nd.conv);
        case NodeKind::batchnorm: {
            const BatchNormState& st = m.bns[static_cast<std::size_t>(nd.bn)];
            if (mode == BnMode::train) {
                BnBatchStats s;
                Var y = op::batchnorm_train(in[0], b.param(st.gamma), b.param(st.beta), st.eps, &s.mean, &s.var);
                if (stats) {
                    s.count = batch * shape_numel(nd.shape) / nd.shape[0];
                    stats->at(static_cast<std::size_t>(nd.bn)) = std::move(s);
                }
                return y;
            }
            auto [scale, shift] = b.bn_affine(nd.bn);
            return op::channel_affine(in[0], scale, shift);
        }
        case NodeKind::relu: return op::relu(in[0]);
        case NodeKind::tanh: return op::tanh(in[0]);
        case NodeKind::max_pool: return op::max_pool2d(in[0], nd.pool);
        case NodeKind::avg_pool: return op::avg_pool2d(in[0], nd.pool);
        case NodeKind::global_avg_pool: return op::global_avg_pool(in[0]);
        case NodeKind::flatten: return op::reshape(in[0], batch_shape(batch, nd.shape));
        case NodeKind::linear: return op::linear(in[0], b.param(nd.weight), opt_param(b, nd.bias));
        case NodeKind::add: {
            Var acc = in[0];
            for (std::size_t k = 1; k < in.size(); ++k) acc = op::add(acc, in[k]);
            return acc;
        }
        case NodeKind::concat: return in.size() == 1 ? in[0] : op::concat_channels(in);
        case NodeKind::mixed:
            if (in.empty()) return b.tape().constant(Tensor(batch_shape(batch, nd.shape)));
            return op::weighted_sum(in, b.mix_row(nd.arch, nd.arch_row), nd.cols);
    }
    throw Error("apply_node: unknown node kind");
}

Var forward(Binding& b, const Var& x, BnMode mode, std::vector<BnBatchStats>* stats) {
    const Model& m = b.model();
    check_input(m, x);
    const std::size_t n = x.shape()[0];
    if (stats) stats->assign(m.bns.size(), {});
    std::vector<Var> v(m.nodes.size());
    std::vector<Var> in;
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        const GraphNode& nd = m.nodes[i];
        if (nd.kind == NodeKind::input) {
            v[i] = x;
            continue;
        }
        in.clear();
        for (int k : nd.inputs) in.push_back(v[static_cast<std::size_t>(k)]);
        v[i] = apply_node(b, static_cast<int>(i), in, mode, stats, n);
    }
    return v[static_cast<std::size_t>(m.output)];
}

void update_running_stats(Model& model, const std::vector<BnBatchStats>& stats) {
    if (stats.size() != model.bns.size()) throw Error("batch statistics do not match the model's BN layers");
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const BnBatchStats& s = stats[i];
        if (s.count == 0) continue;
        BatchNormState& st = model.bns[i];
        const Real unbias = s.count > 1 ? static_cast<Real>(s.count) / static_cast<Real>(s.count - 1) : Real(1);
        for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
            st.running_mean[c] = (1 - st.momentum) * st.running_mean[c] + st.momentum * s.mean[c];
            st.running_var[c] = (1 - st.momentum) * st.running_var[c] + st.momentum * s.var[c] * unbias;
        }
    }
}

Dual forward_tangent(Binding& b, const Var& x, const Var& t) {
    const Model& m = b.model();
    check_input(m, x);
    require_same_shape(x.value(), t.value(), "forward_tangent direction");
    const std::size_t n = x.shape()[0];
    std::vector<Dual> v(m.nodes.size());
    for (std::size_t i = 0; i < m.nodes.size(); ++i) {
        const GraphNode& nd = m.nodes[i];
        auto in = [&](std::size_t k) -> const Dual& { return v[static_cast<std::size_t>(nd.inputs[k])]; };
        Dual& out = v[i];
        switch (nd.kind) {
            case NodeKind::input: out = {x, t}; break;
            case NodeKind::conv:
                out.primal = op::conv2d(in(0).primal, b.param(nd.weight), opt_param(b, nd.bias), nd.conv);
                out.tangent = op::conv2d(in(0).tangent, b.param(nd.weight), std::nullopt, nd.conv);
                break;
            case NodeKind::batchnorm: {
                auto [scale, shift] = b.bn_affine(nd.bn);
                out.primal = op::channel_affine(in(0).primal, scale, shift);
                out.tangent = op::channel_affine(in(0).tangent, scale, std::nullopt);
                break;
            }
            case NodeKind::relu:
                out.primal = op::relu(in(0).primal);
                out.tangent = op::mul_const(in(0).tangent, relu_mask(in(0).primal.value()));
                break;
            case NodeKind::tanh: {
                out.primal = op::tanh(in(0).primal);
                const Tensor ones(out.primal.shape(), Real(1));
                Var deriv = op::add_const(op::scale(op::mul(out.primal, out.primal), Real(-1)), ones);
                out.tangent = op::mul(in(0).tangent, deriv);
                break;
            }
            case NodeKind::max_pool: {
                std::vector<std::size_t> arg;
                out.primal = op::max_pool2d(in(0).primal, nd.pool, &arg);
                out.tangent = op::gather(in(0).tangent, std::move(arg), out.primal.shape());
                break;
            }
            case NodeKind::avg_pool:
                out.primal = op::avg_pool2d(in(0).primal, nd.pool);
                out.tangent = op::avg_pool2d(in(0).tangent, nd.pool);
                break;
            case NodeKind::global_avg_pool:
                out.primal = op::global_avg_pool(in(0).primal);
                out.tangent = op::global_avg_pool(in(0).tangent);
                break;
            case NodeKind::flatten:
                out.primal = op::reshape(in(0).primal, batch_shape(n, nd.shape));
                out.tangent = op::reshape(in(0).tangent, batch_shape(n, nd.shape));
                break;
            case NodeKind::linear:
                out.primal = op::linear(in(0).primal, b.param(nd.weight), opt_param(b, nd.bias));
                out.tangent = op::linear(in(0).tangent, b.param(nd.weight), std::nullopt);
                break;
            case NodeKind::add: {
                out = in(0);
                for (std::size_t k = 1; k < nd.inputs.size(); ++k) {
                    out.primal = op::add(out.primal, in(k).primal);
                    out.tangent = op::add(out.tangent, in(k).tangent);
                }
                break;
            }
            case NodeKind::concat: {
                std::vector<Var> ps, ts;
                for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
                    ps.push_back(in(k).primal);
                    ts.push_back(in(k).tangent);
                }
                out.primal = ps.size() == 1 ? ps[0] : op::concat_channels(ps);
                out.tangent = ts.size() == 1 ? ts[0] : op::concat_channels(ts);
                break;
            }
            case NodeKind::mixed: {
                if (nd.inputs.empty()) {
                    out.primal = b.tape().constant(Tensor(batch_shape(n, nd.shape)));
                    out.tangent = out.primal;
                    break;
                }
                std::vector<Var> ps, ts;
                for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
                    ps.push_back(in(k).primal);
                    ts.push_back(in(k).tangent);
                }
                Var w = b.mix_row(nd.arch, nd.arch_row);
                out.primal = op::weighted_sum(ps, w, nd.cols);
                out.tangent = op::weighted_sum(ts, w, nd.cols);
                break;
            }
        }
    }
    return v[static_cast<std::size_t>(m.output)];
}

Tensor predict_logits(const Model& model, const Tensor& x) {
    Tape tape;
    Binding b(tape, model, {false, false});
    return forward(b, tape.constant(x), BnMode::eval).value();
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows expects N x K");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = logits.ptr() + i * k;
        out[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    return out;
}

Real accuracy(const Model& model, const Tensor& x, const std::vector<std::size_t>& labels, std::size_t batch) {
    const std::size_t n = x.dim(0);
    if (labels.size() != n) throw ShapeError("accuracy: label count mismatch");
    std::size_t correct = 0;
    for (std::size_t s = 0; s < n; s += batch) {
        const std::size_t e = std::min(n, s + batch);
        const auto pred = argmax_rows(predict_logits(model, slice_rows(x, s, e)));
        for (std::size_t i = s; i < e; ++i) correct += pred[i - s] == labels[i];
    }
    return static_cast<Real>(correct) / static_cast<Real>(n);
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || begin >= end || end > t.dim(0)) throw ShapeError("slice_rows: bad range");
    Shape s = t.shape();
    const std::size_t row = t.size() / s[0];
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<Real>(t.ptr() + begin * row, t.ptr() + end * row));
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw ShapeError("take_rows: no rows");
    Shape s = t.shape();
    const std::size_t row = t.size() / s[0];
    s[0] = rows.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.dim(0)) throw ShapeError("take_rows: index out of range");
        std::copy_n(t.ptr() + rows[i] * row, row, out.ptr() + i * row);
    }
    return out;
}

Shape batch_shape(std::size_t n, const Shape& per_example) {
    Shape s{n};
    s.insert(s.end(), per_example.begin(), per_example.end());
    return s;
}

}  // namespace robnas
