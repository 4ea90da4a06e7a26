#include "robnas/optim.hpp"

#include <cmath>
#include <string>

namespace robnas {

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
    if (!(cfg_.lr >= 0)) throw ConfigError("optimizer learning rate must be non-negative");
    if (cfg_.weight_decay < 0) throw ConfigError("optimizer weight decay must be non-negative");
}

void Optimizer::set_lr(Real lr) {
    if (!(lr >= 0)) throw ConfigError("optimizer learning rate must be non-negative");
    cfg_.lr = lr;
}

void Optimizer::step(Tensor& param, const Tensor& grad) {
    std::vector<Tensor*> p{&param};
    std::vector<const Tensor*> g{&grad};
    step(p, g);
}

void Optimizer::step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: params and grads differ in count");
    if (m_.empty()) {
        for (auto* p : params) {
            m_.emplace_back(p->shape());
            if (cfg_.kind == OptimizerKind::adam) v_.emplace_back(p->shape());
        }
    }
    if (m_.size() != params.size()) throw ShapeError("optimizer: parameter count changed between steps");
    ++t_;
    const Real lr = cfg_.lr, wd = cfg_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        require_same_shape(p, g, "optimizer grad");
        require_same_shape(p, m_[i], "optimizer moment");
        if (cfg_.kind == OptimizerKind::sgd) {
            Tensor& buf = m_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const Real d = g[j] + wd * p[j];
                buf[j] = t_ == 1 ? d : cfg_.momentum * buf[j] + d;
                p[j] -= lr * buf[j];
            }
        } else {
            const Real bc1 = 1 - std::pow(cfg_.beta1, static_cast<Real>(t_));
            const Real bc2 = 1 - std::pow(cfg_.beta2, static_cast<Real>(t_));
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const Real d = g[j] + wd * p[j];
                m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * d;
                v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * d * d;
                p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            }
        }
        if (!p.all_finite()) throw NumericError("optimizer produced a non-finite parameter");
    }
}

std::vector<Tensor> optimizer_step(Optimizer& opt, const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (!(opt.config().lr > 0)) throw ConfigError("optimizer_step: learning rate must be positive");
    std::vector<Tensor> out = params;
    std::vector<Tensor*> p;
    std::vector<const Tensor*> g;
    for (std::size_t i = 0; i < out.size(); ++i) {
        p.push_back(&out[i]);
        g.push_back(i < grads.size() ? &grads[i] : nullptr);
    }
    if (grads.size() != params.size()) throw ShapeError("optimizer_step: params and grads differ in count");
    opt.step(p, g);
    return out;
}

}  // namespace robnas
