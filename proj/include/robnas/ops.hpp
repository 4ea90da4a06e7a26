#pragma once

// Differentiable primitive ops recorded on a Tape.
//
// Image tensors are N x C x H x W; feature matrices are N x D.

#include <cstddef>
#include <optional>
#include <vector>

#include "robnas/tape.hpp"

namespace robnas::op {

struct ConvAttrs {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

struct PoolAttrs {
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvAttrs& a);
std::size_t pool_out_extent(std::size_t in, const PoolAttrs& a);

// element-wise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real c);
/// a * m with a constant multiplier tensor (same shape).
Var mul_const(const Var& a, const Tensor& m);
Var add_const(const Var& a, const Tensor& c);
/// s * a for a single-element var s.
Var mul_scalar(const Var& a, const Var& s);
Var abs(const Var& a);
Var sqrt(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);

// reductions and layout
Var sum(const Var& a);
Var mean(const Var& a);
/// N x M -> N, summing the trailing axis.
Var sum_rows(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Concatenates N x C_i x H x W tensors along channels.
Var concat_channels(const std::vector<Var>& xs);
/// out[i] = a[indices[i]] (flat indices), reshaped to `shape`.
Var gather(const Var& a, std::vector<std::size_t> indices, Shape shape);

// network layers
Var conv2d(const Var& x, const Var& w, const std::optional<Var>& b, const ConvAttrs& attrs);
/// Training-mode batch norm over (N, H, W); writes the biased batch statistics when requested.
Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, Real eps, Tensor* batch_mean = nullptr,
                    Tensor* batch_var = nullptr);
/// y = scale_c * x + shift_c per channel; x is N x C (x H x W).
Var channel_affine(const Var& x, const Var& scale, const std::optional<Var>& shift);
/// Max pooling with -inf padding; optionally reports the flat argmax index of every output.
/// Ties resolve to the first maximum in window scan order.
Var max_pool2d(const Var& x, const PoolAttrs& attrs, std::vector<std::size_t>* argmax = nullptr);
/// Average pooling that excludes padded cells from the divisor.
Var avg_pool2d(const Var& x, const PoolAttrs& attrs);
Var global_avg_pool(const Var& x);
/// x: N x D, w: K x D, b: K -> N x K.
Var linear(const Var& x, const Var& w, const std::optional<Var>& b);

// classification
/// Row-wise softmax of an R x C matrix.
Var softmax_rows(const Var& a);
/// sum_i weights[cols[i]] * xs[i], with `weights` a vector var.
Var weighted_sum(const std::vector<Var>& xs, const Var& weights, const std::vector<std::size_t>& cols);
/// Mean cross-entropy of N x K logits.
Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels);
/// Row-wise minimum (gradient routed to the first argmin).
Var min_rows(const Var& a);
/// Row-wise smooth minimum -(1/T) log sum exp(-T a).
Var softmin_rows(const Var& a, Real temperature);

/// Lower bounds on the class margins f_y - f_k (k != y, ascending) of an affine
/// head f = W z + b, with z = center + e and
///   * `radius` given: |e_j| <= radius_j (box), or
///   * `radius` empty: ||e||_p <= eps, concretized with the dual exponent `dual_q` in {1, 2}.
/// Returns N x (K-1).
Var affine_margin_lower(const Var& center, const std::optional<Var>& radius, Real eps, int dual_q, const Var& w,
                        const std::optional<Var>& b, const std::vector<std::size_t>& labels);
/// lower_y - upper_k for k != y (ascending); N x (K-1).
Var interval_margin(const Var& lower, const Var& upper, const std::vector<std::size_t>& labels);

}  // namespace robnas::op
