#include <cstdlib>
#include <string>

#include "robnas/kernels.hpp"

namespace robnas::kernels {

namespace {

struct Table {
    Backend backend;
    void (*axpy)(std::size_t, Real, const Real*, Real*);
    Real (*dot)(std::size_t, const Real*, const Real*);
    void (*mul)(std::size_t, const Real*, const Real*, Real*);
    void (*relu)(std::size_t, const Real*, Real*);
    Real (*sum)(std::size_t, const Real*);
};

constexpr Table kScalar{Backend::scalar, scalar::axpy, scalar::dot, scalar::mul, scalar::relu, scalar::sum};
#if ROBNAS_HAVE_AVX2_KERNELS
constexpr Table kAvx2{Backend::avx2, avx2::axpy, avx2::dot, avx2::mul, avx2::relu, avx2::sum};
#endif

const Table& table_for(Backend b) {
#if ROBNAS_HAVE_AVX2_KERNELS
    if (b == Backend::avx2) return kAvx2;
#endif
    return kScalar;
}

Backend initial_backend() {
    Backend b = detect_backend();
    if (const char* env = std::getenv("ROBNAS_SIMD")) {
        std::string v(env);
        if (v == "scalar") b = Backend::scalar;
        else if (v == "avx2" && backend_supported(Backend::avx2)) b = Backend::avx2;
    }
    return b;
}

const Table*& current() {
    static const Table* t = &table_for(initial_backend());
    return t;
}

}  // namespace

std::string_view backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

bool backend_supported(Backend b) {
    if (b == Backend::scalar) return true;
#if ROBNAS_HAVE_AVX2_KERNELS
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend detect_backend() { return backend_supported(Backend::avx2) ? Backend::avx2 : Backend::scalar; }

Backend active_backend() { return current()->backend; }

void set_backend(Backend b) {
    if (!backend_supported(b)) throw Error("SIMD backend not supported on this CPU: " + std::string(backend_name(b)));
    current() = &table_for(b);
}

void axpy(std::size_t n, Real a, const Real* x, Real* y) { current()->axpy(n, a, x, y); }
Real dot(std::size_t n, const Real* x, const Real* y) { return current()->dot(n, x, y); }
void mul(std::size_t n, const Real* x, const Real* y, Real* out) { current()->mul(n, x, y, out); }
void relu(std::size_t n, const Real* x, Real* out) { current()->relu(n, x, out); }
Real sum(std::size_t n, const Real* x) { return current()->sum(n, x); }

}  // namespace robnas::kernels
