#include "robnas/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace robnas {

namespace {

Real checked(Real v) {
    if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
    return v;
}

}  // namespace

std::vector<Tensor> numeric_gradient(const ValueFn& fn, const std::vector<Tensor>& params, Real h) {
    if (!(h > 0)) throw Error("grad_check: step must be positive");
    std::vector<Tensor> work = params;
    std::vector<Tensor> out;
    for (std::size_t p = 0; p < work.size(); ++p) {
        Tensor g(work[p].shape());
        for (std::size_t i = 0; i < work[p].size(); ++i) {
            const Real orig = work[p][i];
            work[p][i] = orig + h;
            const Real fp = checked(fn(work));
            work[p][i] = orig - h;
            const Real fm = checked(fn(work));
            work[p][i] = orig;
            g[i] = (fp - fm) / (2 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

Real max_rel_error(const std::vector<Tensor>& analytic, const std::vector<Tensor>& numeric) {
    if (analytic.size() != numeric.size()) throw ShapeError("max_rel_error: tensor count mismatch");
    Real worst = 0;
    for (std::size_t p = 0; p < analytic.size(); ++p) {
        require_same_shape(analytic[p], numeric[p], "max_rel_error");
        for (std::size_t i = 0; i < analytic[p].size(); ++i) {
            const Real a = analytic[p][i];
            worst = std::max(worst, std::abs(a - numeric[p][i]) / std::max(Real(1), std::abs(a)));
        }
    }
    return worst;
}

Real grad_check(const TapeFn& fn, const std::vector<Tensor>& params, Real h) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p));
    Var out = fn(tape, leaves);
    checked(out.value().item());
    Gradients g = tape.backward(out);
    std::vector<Tensor> analytic;
    for (const auto& v : leaves) analytic.push_back(g[v]);

    ValueFn value = [&fn](const std::vector<Tensor>& ps) {
        Tape t;
        std::vector<Var> vs;
        for (const auto& p : ps) vs.push_back(t.leaf(p, false));
        return fn(t, vs).value().item();
    };
    return max_rel_error(analytic, numeric_gradient(value, params, h));
}

}  // namespace robnas
