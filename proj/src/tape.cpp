#include "robnas/tape.hpp"

#include <string>

namespace robnas {

const Tensor& Var::value() const {
    if (!tape_) throw Error("access through an empty Var");
    return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::operator[](const Var& v) const {
    auto i = static_cast<std::size_t>(v.id());
    if (i >= grads_.size() || !grads_[i]) throw Error("no gradient recorded for node " + std::to_string(v.id()));
    return *grads_[i];
}

bool Gradients::contains(const Var& v) const {
    auto i = static_cast<std::size_t>(v.id());
    return i < grads_.size() && grads_[i].has_value();
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite result in op '" + std::string(op) + "'");
    Node n;
    n.value = std::move(value);
    n.op = op;
    bool any = false;
    for (const auto& in : inputs) {
        if (in.tape() != this) throw Error("op '" + std::string(op) + "' mixes vars from different tapes");
        any = any || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    if (grad_enabled_ && any) {
        n.requires_grad = true;
        n.backward = std::move(backward);
        n.inputs.reserve(inputs.size());
        for (const auto& in : inputs) n.inputs.push_back(in.id());
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Gradients Tape::backward(const Var& output, const Tensor* seed, bool retain) {
    if (output.tape() != this) throw Error("backward: output belongs to another tape");
    if (consumed_) throw Error("backward: tape already consumed; clear() and re-record first");
    const auto out_id = static_cast<std::size_t>(output.id());
    const Tensor& out_val = nodes_[out_id].value;

    Gradients result;
    result.grads_.resize(nodes_.size());
    if (seed) {
        require_same_shape(*seed, out_val, "backward seed");
        result.grads_[out_id] = *seed;
    } else {
        if (out_val.size() != 1) throw ShapeError("backward: non-scalar output needs a seed cotangent");
        result.grads_[out_id] = Tensor(out_val.shape(), Real(1));
    }

    std::vector<Tensor*> in_ptrs;
    for (std::size_t i = out_id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        auto& g = result.grads_[i];
        if (!g || n.is_leaf || !n.backward) continue;
        in_ptrs.assign(n.inputs.size(), nullptr);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            auto j = static_cast<std::size_t>(n.inputs[k]);
            if (!nodes_[j].requires_grad) continue;
            if (!result.grads_[j]) result.grads_[j] = Tensor(nodes_[j].value.shape());
            in_ptrs[k] = &*result.grads_[j];
        }
        n.backward(*g, in_ptrs);
        if (i != out_id) g.reset();
    }
    // unreachable leaves report zero
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].is_leaf && nodes_[i].requires_grad && !result.grads_[i])
            result.grads_[i] = Tensor(nodes_[i].value.shape());
    if (!retain) consumed_ = true;
    return result;
}

void Tape::clear() {
    nodes_.clear();
    consumed_ = false;
}

}  // namespace robnas
