#pragma once

// Data-parallel inner loops used by the tensor ops.
//
// Every kernel has a portable scalar reference in `kernels::scalar` and, on
// x86-64, an AVX2+FMA variant in `kernels::avx2`. The free functions dispatch
// through a table chosen once at startup from CPUID; ROBNAS_SIMD=scalar|avx2
// in the environment overrides the choice. Variants are equivalence-tested
// against the scalar reference (tests/test_kernels.cpp).

#include <cstddef>
#include <string_view>

#include "robnas/tensor.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define ROBNAS_HAVE_AVX2_KERNELS 1
#else
#define ROBNAS_HAVE_AVX2_KERNELS 0
#endif

namespace robnas::kernels {

enum class Backend { scalar, avx2 };

std::string_view backend_name(Backend b);
/// Best backend the running CPU supports.
Backend detect_backend();
Backend active_backend();
/// Throws if the CPU cannot run `b`.
void set_backend(Backend b);
bool backend_supported(Backend b);

// y += a * x
void axpy(std::size_t n, Real a, const Real* x, Real* y);
Real dot(std::size_t n, const Real* x, const Real* y);
// out = x * y (element-wise)
void mul(std::size_t n, const Real* x, const Real* y, Real* out);
// out = max(x, 0)
void relu(std::size_t n, const Real* x, Real* out);
// out = sum(x)
Real sum(std::size_t n, const Real* x);

namespace scalar {
void axpy(std::size_t n, Real a, const Real* x, Real* y);
Real dot(std::size_t n, const Real* x, const Real* y);
void mul(std::size_t n, const Real* x, const Real* y, Real* out);
void relu(std::size_t n, const Real* x, Real* out);
Real sum(std::size_t n, const Real* x);
}  // namespace scalar

#if ROBNAS_HAVE_AVX2_KERNELS
namespace avx2 {
void axpy(std::size_t n, Real a, const Real* x, Real* y);
Real dot(std::size_t n, const Real* x, const Real* y);
void mul(std::size_t n, const Real* x, const Real* y, Real* out);
void relu(std::size_t n, const Real* x, Real* out);
Real sum(std::size_t n, const Real* x);
}  // namespace avx2
#endif

}  // namespace robnas::kernels
