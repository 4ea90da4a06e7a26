#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "robnas/tensor.hpp"

namespace robnas {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Accumulates the gradient of one op's output into its inputs' buffers.
/// Entries of `grad_inputs` are null for inputs that do not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_inputs)>;

class Gradients {
public:
    /// Gradient with respect to a leaf (zeros when the leaf is unreachable).
    const Tensor& operator[](const Var& v) const;
    bool contains(const Var& v) const;

private:
    friend class Tape;
    std::vector<std::optional<Tensor>> grads_;
};

/// Single-threaded reverse-mode recording of primitive ops.
///
/// Nodes are appended in execution order, so node ids are a topological order.
/// A backward pass consumes the tape unless `retain` is set; running backward on
/// a consumed tape is an error until clear() starts a new recording.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Appends an op. Throws NumericError when `value` is not finite.
    Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

    Gradients backward(const Var& output, const Tensor* seed = nullptr, bool retain = false);

    /// When disabled, ops are recorded without backward closures (values only).
    void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
    bool grad_enabled() const { return grad_enabled_; }

    void clear();
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
        std::string_view op;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool consumed_ = false;
};

/// Disables gradient recording for the lifetime of the guard.
class NoGradGuard {
public:
    explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) { tape.set_grad_enabled(false); }
    ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape& tape_;
    bool prev_;
};

}  // namespace robnas
