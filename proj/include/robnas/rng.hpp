#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "robnas/tensor.hpp"

namespace robnas {

/// Deterministic generator derived from a root seed and a stream name, so that
/// e.g. the "weights" and "attacks" streams never share state.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    Rng(std::uint64_t root, std::string_view stream) : eng_(derive_seed(root, stream)) {}

    static std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

    Rng split(std::string_view stream) { return Rng(next_u64(), stream); }

    std::uint64_t next_u64() { return eng_(); }
    /// Uniform in [0, 1).
    Real uniform() { return static_cast<Real>(static_cast<double>(eng_() >> 11) * 0x1.0p-53); }
    Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal (Box-Muller, one value per call).
    Real normal();
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

    Tensor uniform_tensor(Shape shape, Real lo, Real hi);
    Tensor normal_tensor(Shape shape, Real stddev = 1);
    /// Uniform on the unit sphere in R^n.
    Tensor unit_sphere(std::size_t n);
    void shuffle(std::vector<std::size_t>& v);

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

}  // namespace robnas
