#pragma once

#include <vector>

#include "robnas/tensor.hpp"

namespace robnas {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    Real lr = 0.025;
    Real momentum = 0.9;  // sgd only
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0;
};

/// SGD with heavy-ball momentum, or Adam with bias correction. Weight decay is
/// L2 (added to the gradient before the moment updates).
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg);

    /// Updates `params` in place. Moment buffers are created on the first call
    /// and must keep matching shapes afterwards.
    void step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);
    void step(Tensor& param, const Tensor& grad);

    const OptimizerConfig& config() const { return cfg_; }
    void set_lr(Real lr);
    std::size_t steps() const { return t_; }

    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }

private:
    OptimizerConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

/// Functional form: returns updated copies and leaves the inputs untouched.
std::vector<Tensor> optimizer_step(Optimizer& opt, const std::vector<Tensor>& params, const std::vector<Tensor>& grads);

}  // namespace robnas
