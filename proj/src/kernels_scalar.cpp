#include "robnas/kernels.hpp"

namespace robnas::kernels::scalar {

void axpy(std::size_t n, Real a, const Real* x, Real* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

Real dot(std::size_t n, const Real* x, const Real* y) {
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void mul(std::size_t n, const Real* x, const Real* y, Real* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void relu(std::size_t n, const Real* x, Real* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > Real(0) ? x[i] : Real(0);
}

Real sum(std::size_t n, const Real* x) {
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

}  // namespace robnas::kernels::scalar
