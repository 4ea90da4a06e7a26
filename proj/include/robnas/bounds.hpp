#pragma once

// Certified bounds on a model's outputs under an lp-bounded input perturbation.
//
// The graph interpreter carries every node as a box (center, radius) recorded on
// the tape, so bounds and margins are differentiable in weights and alpha. A
// mixed edge's box is the softmax-weighted combination of its candidates' boxes.
// An l2 ball stays a ball until its first conv/linear consumer, where each output
// row a gets radius eps * ||a||_2. The final linear head is folded into the
// margin: (w_y - w_k) is bounded directly instead of subtracting logit intervals.

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "robnas/model.hpp"

namespace robnas {

enum class Norm { l2, linf };

std::string_view norm_name(Norm n);
/// Accepts "2", "l2", "inf", "linf".
Norm parse_norm(std::string_view s);

struct BoundOptions {
    /// 0: interval arithmetic through ReLU. 1: each ReLU takes the linear
    /// relaxation (lower line lambda*z, upper chord) and is composed with the
    /// following affine block before concretizing on the block's input box.
    int substitution_depth = 0;
};

struct IntervalBounds {
    Tensor lower;
    Tensor upper;
};

struct IntervalVars {
    Var lower;
    Var upper;
};

/// Affine bounds A_L z + B_L <= block(z) <= A_U z + B_U for one example, with
/// dense A of shape out x in and B of shape out.
struct LinearBounds {
    Tensor A_L, B_L, A_U, B_U;
};

/// Triangle relaxation of ReLU on [lower, upper] (diagonal A).
LinearBounds relu_linear_bounds(const Tensor& lower, const Tensor& upper);
/// Exact bounds of eval-mode batch norm (diagonal A); eps <= 0 is treated as 0+.
LinearBounds batchnorm_linear_bounds(const Tensor& gamma, const Tensor& beta, const Tensor& mean, const Tensor& var,
                                     Real eps);

/// Composes the linear bounds of a chain of single-input nodes of `model`
/// (nodes[chain[k]] reads nodes[chain[k-1]]) on the per-example box `in`.
LinearBounds block_bounds(const Model& model, const std::vector<int>& chain, const IntervalBounds& in);
IntervalBounds concretize(const LinearBounds& lb, const IntervalBounds& in);

/// Output interval of the model for inputs x + e, ||e||_p <= eps.
IntervalVars propagate_bounds(Binding& b, const Tensor& x, Real eps, Norm norm, const BoundOptions& opts = {});

/// Lower bounds on f_y - f_k for every k != y (ascending k); N x (K-1).
Var margin_bounds(Binding& b, const Tensor& x, const std::vector<std::size_t>& labels, Real eps, Norm norm,
                  const BoundOptions& opts = {});

/// lower(label) - max_{k != label} upper(k) from a logit interval.
Real margin_lower_bound(const IntervalBounds& logits, std::size_t row, std::size_t label);

struct CbMetric {
    Var value;               // mean per-example margin (smooth min when temperature > 0)
    Real mean_hard_margin;   // mean per-example hard min margin
};

CbMetric cb_metric(Binding& b, const Tensor& x, const std::vector<std::size_t>& labels, Real eps, Norm norm,
                   Real temperature, const BoundOptions& opts = {});

/// eps + step when the certified margin is positive, else max(eps_min, eps - step).
Real adapt_epsilon(Real eps_prev, Real margin, Real step = 0.005, Real eps_min = 1e-4);

struct CertifiedRadius {
    Real value = 0;
    Norm norm = Norm::linf;
    Real tolerance = 0;
};

/// Largest eps (within tol) at which the hard margin bound of example x
/// (shape 1 x input_shape) stays non-negative; 0 when x is misclassified.
CertifiedRadius certify_radius(const Model& model, const Tensor& x, std::size_t label, Norm norm, Real tol = 1e-4,
                               const BoundOptions& opts = {}, Real eps_cap = 1e3);

}  // namespace robnas
