#include "robnas/kernels.hpp"

#if ROBNAS_HAVE_AVX2_KERNELS

#include <immintrin.h>

#include <type_traits>

#define ROBNAS_AVX2 __attribute__((target("avx2,fma")))

namespace robnas::kernels::avx2 {

namespace {

ROBNAS_AVX2 inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

ROBNAS_AVX2 inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehl_ps(lo, lo);
    lo = _mm_add_ps(lo, sh);
    sh = _mm_shuffle_ps(lo, lo, 0x1);
    return _mm_cvtss_f32(_mm_add_ss(lo, sh));
}

// Thin wrappers so the loops below are written once for float and double.
template <class T>
struct Vec;

template <>
struct Vec<double> {
    using reg = __m256d;
    static constexpr std::size_t width = 4;
    ROBNAS_AVX2 static reg load(const double* p) { return _mm256_loadu_pd(p); }
    ROBNAS_AVX2 static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    ROBNAS_AVX2 static reg set1(double a) { return _mm256_set1_pd(a); }
    ROBNAS_AVX2 static reg zero() { return _mm256_setzero_pd(); }
    ROBNAS_AVX2 static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
    ROBNAS_AVX2 static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
    ROBNAS_AVX2 static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
    ROBNAS_AVX2 static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
};

template <>
struct Vec<float> {
    using reg = __m256;
    static constexpr std::size_t width = 8;
    ROBNAS_AVX2 static reg load(const float* p) { return _mm256_loadu_ps(p); }
    ROBNAS_AVX2 static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    ROBNAS_AVX2 static reg set1(float a) { return _mm256_set1_ps(a); }
    ROBNAS_AVX2 static reg zero() { return _mm256_setzero_ps(); }
    ROBNAS_AVX2 static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
    ROBNAS_AVX2 static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
    ROBNAS_AVX2 static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
    ROBNAS_AVX2 static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
};

using V = Vec<Real>;

}  // namespace

ROBNAS_AVX2 void axpy(std::size_t n, Real a, const Real* x, Real* y) {
    const auto va = V::set1(a);
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width) V::store(y + i, V::fmadd(va, V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
}

ROBNAS_AVX2 Real dot(std::size_t n, const Real* x, const Real* y) {
    auto acc0 = V::zero();
    auto acc1 = V::zero();
    std::size_t i = 0;
    for (; i + 2 * V::width <= n; i += 2 * V::width) {
        acc0 = V::fmadd(V::load(x + i), V::load(y + i), acc0);
        acc1 = V::fmadd(V::load(x + i + V::width), V::load(y + i + V::width), acc1);
    }
    for (; i + V::width <= n; i += V::width) acc0 = V::fmadd(V::load(x + i), V::load(y + i), acc0);
    Real s = hsum(V::add(acc0, acc1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

ROBNAS_AVX2 void mul(std::size_t n, const Real* x, const Real* y, Real* out) {
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width) V::store(out + i, V::mul(V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) out[i] = x[i] * y[i];
}

ROBNAS_AVX2 void relu(std::size_t n, const Real* x, Real* out) {
    const auto z = V::zero();
    std::size_t i = 0;
    // max(x, 0) returns 0 for NaN inputs in the second operand position; the
    // scalar path does the same (x > 0 is false for NaN).
    for (; i + V::width <= n; i += V::width) V::store(out + i, V::max(V::load(x + i), z));
    for (; i < n; ++i) out[i] = x[i] > Real(0) ? x[i] : Real(0);
}

ROBNAS_AVX2 Real sum(std::size_t n, const Real* x) {
    auto acc = V::zero();
    std::size_t i = 0;
    for (; i + V::width <= n; i += V::width) acc = V::add(acc, V::load(x + i));
    Real s = hsum(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

}  // namespace robnas::kernels::avx2

#endif
