#pragma once

// Jacobian-norm robustness metric: -(delta/N) sum_i (1/K) sum_k ||J_k(x_i)||_q,
// where J_k is the input gradient of logit k and q is the dual of the attack norm.
//
// Gradients with respect to weights and alpha come from a tangent pass: with
// s_k = d||J_k||_q / dJ_k held constant, s_k . J_k equals ||J_k||_q and its
// parameter gradient is the gradient of the norm. J s_k is a Jacobian-vector
// product, which the primal+tangent interpreter records on the tape.

#include <cstdint>
#include <string_view>

#include "robnas/bounds.hpp"
#include "robnas/model.hpp"
#include "robnas/rng.hpp"

namespace robnas {

enum class JacEstimator { exact_rows, random_projection };

std::string_view jac_estimator_name(JacEstimator e);
JacEstimator parse_jac_estimator(std::string_view s);

/// How J s is recorded: forward-mode tangent pass, or central differences
/// (f(x + h s) - f(x - h s)) / 2h through two ordinary forward passes.
enum class JvpMode { tangent, finite_difference };

/// q = 1 for linf attacks, q = 2 for l2.
int dual_exponent(Norm p);
/// 8/255 for linf, 0.5 for l2.
Real default_delta(Norm p);

struct JacNormConfig {
    Norm norm = Norm::linf;
    Real delta = Real(8) / 255;
    JacEstimator estimator = JacEstimator::exact_rows;
    std::size_t n_proj = 1;
    std::uint64_t seed = 0;
    std::size_t exact_cap = 32;
    JvpMode jvp = JvpMode::tangent;
    Real fd_h = 1e-4;
};

/// Eval-mode input Jacobians, N x K x D; K backward passes, each seeding one
/// output coordinate on every row. Throws ConfigError when K > cap.
Tensor exact_jacobian(const Model& model, const Tensor& x, std::size_t cap = 32);

/// sqrt of the mean of K ||v^T J||^2 over n_proj directions v uniform on the unit
/// sphere (one backward pass per projection); x is 1 x input_shape.
Real frobenius_estimate(const Model& model, const Tensor& x, std::size_t n_proj, Rng& rng);

struct JacMetric {
    Var value;                 // -(delta) * mean of per_example
    Tensor per_example;        // (1/K) sum_k ||J_k(x_i)||_q (exact), or ||J||_F / sqrt(K) (projection)
};

/// The random-projection estimator bounds (1/K) sum_k ||J_k||_2 from above by
/// ||J||_F / sqrt(K) and is only defined for l2 attacks.
JacMetric jac_metric(Binding& b, const Tensor& x, const JacNormConfig& cfg);

/// Per output k: |f_k(x + delta e) - f_k(x)| / (delta ||J_k(x)||_q) for a single
/// example x and direction e (||e||_p = 1 is the caller's contract).
Tensor taylor_gap_ratio(const Model& model, const Tensor& x, const Tensor& e, Real delta, Norm p);

}  // namespace robnas
