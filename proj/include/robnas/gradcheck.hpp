#pragma once

#include <functional>
#include <vector>

#include "robnas/tape.hpp"

namespace robnas {

/// Scalar function recorded on a fresh tape from leaf vars bound to `params`.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;
/// Plain scalar function of parameter values.
using ValueFn = std::function<Real(const std::vector<Tensor>&)>;

/// Central differences of `fn` around `params`, one coordinate at a time.
std::vector<Tensor> numeric_gradient(const ValueFn& fn, const std::vector<Tensor>& params, Real h);

/// max over coordinates of |analytic - numeric| / max(1, |analytic|).
Real max_rel_error(const std::vector<Tensor>& analytic, const std::vector<Tensor>& numeric);

/// Records `fn`, backpropagates, and compares against central differences.
Real grad_check(const TapeFn& fn, const std::vector<Tensor>& params, Real h = 1e-5);

}  // namespace robnas
