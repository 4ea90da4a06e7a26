#pragma once

// Bilevel architecture search: SGD on weights over training batches, Adam on
// alpha over validation batches, objective L_val - gamma * R.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "robnas/bounds.hpp"
#include "robnas/cell_space.hpp"
#include "robnas/data.hpp"
#include "robnas/jacnorm.hpp"
#include "robnas/optim.hpp"

namespace robnas {

enum class MetricKind { none, cb, jacobian };
enum class Unroll { first_order, second_order };

std::string_view metric_name(MetricKind m);
MetricKind parse_metric(std::string_view s);
std::string_view unroll_name(Unroll u);
Unroll parse_unroll(std::string_view s);

struct SearchConfig {
    MetricKind metric = MetricKind::none;
    Real gamma = 0.01;
    OptimizerConfig inner{OptimizerKind::sgd, 0.025, 0.9, 0.9, 0.999, 1e-8, 3e-4};
    OptimizerConfig outer{OptimizerKind::adam, 3e-4, 0.9, 0.5, 0.999, 1e-8, 1e-3};
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    Unroll unroll = Unroll::first_order;
    /// Virtual step size; defaults to the inner learning rate.
    std::optional<Real> xi;
    /// Finite-difference Hessian-vector radius: h = hvp_radius / ||v||.
    Real hvp_radius = 1e-6;
    std::uint64_t seed = 0;

    /// Examples of each validation batch the metric is evaluated on.
    std::size_t metric_batch = 8;
    // certified-bound metric
    Norm norm = Norm::linf;
    Real eps_init = 0.03;
    Real eps_step = 0.005;
    Real eps_min = 1e-4;
    Real temperature = 50;
    BoundOptions bounds;
    // Jacobian metric (its norm follows `norm`)
    JacNormConfig jac;

    Real virtual_step() const { return xi.value_or(inner.lr); }
    void validate() const;
};

/// Per-metric optimizer settings: cb uses inner lr 0.1 and alpha lr 6e-4 with
/// decay 3e-4; jacobian and none use inner lr 0.025 and alpha lr 3e-4 with decay 1e-3.
SearchConfig search_defaults(MetricKind metric);

struct ObjectiveEval {
    Real objective = 0;
    Real val_loss = 0;
    Real metric = 0;       // R (0 when not part of the objective)
    Real hard_margin = 0;  // mean hard certified margin (cb only)
    std::vector<Tensor> grad_weights;
    std::vector<Tensor> grad_alpha;
};

/// L_val (train-mode BN on `val`) - gamma * R (eval-mode BN on the metric
/// sub-batch). R is only computed when gamma > 0 and a metric is selected.
ObjectiveEval evaluate_objective(const Model& net, const Batch& val, const SearchConfig& cfg, Real eps,
                                 bool grad_weights, bool grad_alpha);

/// Mean training cross-entropy and its gradients (train-mode BN).
ObjectiveEval train_loss_grad(const Model& net, const Batch& train, bool grad_weights, bool grad_alpha);

/// One optimizer step on the weights with alpha frozen; updates BN running
/// statistics. Returns the batch loss.
Real inner_step(Model& net, const Batch& train, Optimizer& opt);

/// Gradient of the objective with respect to every arch table. Second order
/// evaluates it at w' = w - xi grad_w L_train and subtracts the finite-difference
/// Hessian-vector term xi (grad_a L_train(w+) - grad_a L_train(w-)) / 2h with
/// w+- = w +- h v, v = grad_w' objective, h = hvp_radius / ||v||.
std::vector<Tensor> hypergradient(const Model& net, const Batch& val, const Batch& train, const SearchConfig& cfg,
                                  Real eps, ObjectiveEval* info = nullptr);

/// One Adam step on alpha. Returns the objective evaluation it used.
ObjectiveEval outer_step(Model& net, Optimizer& arch_opt, const Batch& val, const Batch& train,
                         const SearchConfig& cfg, Real eps);

struct EpochTrace {
    std::size_t epoch = 0;
    Real train_loss = 0;
    Real val_loss = 0;
    Real objective = 0;
    Real metric = 0;   // R on the fixed validation sub-batch at epoch end
    Real epsilon = 0;  // cb radius used during the epoch
};

struct SearchResult {
    Model supernet;
    Genotype genotype;
    std::vector<EpochTrace> trace;
    double seconds = 0;
    bool diverged = false;
    std::string error;
};

/// Deterministic given cfg.seed. On a non-finite objective the run stops and
/// returns the partial trace with `diverged` set.
SearchResult run_search(const SearchConfig& cfg, const SpaceConfig& space, const Dataset& train, const Dataset& val);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    OptimizerConfig opt{OptimizerKind::sgd, 0.025, 0.9, 0.9, 0.999, 1e-8, 3e-4};
    bool cosine = true;
    std::uint64_t seed = 0;
};

/// Trains the weights of `model` from its current state; returns per-epoch mean loss.
std::vector<Real> train_weights(Model& model, const Dataset& train, const TrainConfig& cfg);

struct RetrainResult {
    Model model;
    std::vector<Real> epoch_loss;
    Real train_accuracy = 0;
    Real test_accuracy = 0;
};

/// Builds the discrete network of `g` and trains it from scratch.
RetrainResult retrain(const Genotype& g, const SpaceConfig& space, const Dataset& train, const Dataset& test,
                      const TrainConfig& cfg);

}  // namespace robnas
