#include "robnas/rng.hpp"

#include <cmath>
#include <numbers>

namespace robnas {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t Rng::derive_seed(std::uint64_t root, std::string_view stream) {
    // FNV-1a over the stream name, mixed with the root
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix(root ^ splitmix(h));
}

Real Rng::normal() {
    double u1 = 0;
    while (u1 <= 0) u1 = static_cast<double>(uniform());
    const double u2 = static_cast<double>(uniform());
    return static_cast<Real>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * std::numbers::pi * u2));
}

Tensor Rng::uniform_tensor(Shape shape, Real lo, Real hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = uniform(lo, hi);
    return t;
}

Tensor Rng::normal_tensor(Shape shape, Real stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
}

Tensor Rng::unit_sphere(std::size_t n) {
    Tensor t(Shape{n});
    Real nrm = 0;
    while (nrm < Real(1e-12)) {
        for (auto& v : t.data()) v = normal();
        nrm = l2_norm(t.data());
    }
    t *= Real(1) / nrm;
    return t;
}

void Rng::shuffle(std::vector<std::size_t>& v) {
    // Fisher-Yates with our own index draw so results do not depend on the
    // standard library's shuffle implementation
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
}

}  // namespace robnas
