#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robnas {

#ifdef ROBNAS_REAL_FLOAT
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
/// Raised when a forward computation produces NaN or Inf.
struct NumericError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array with value semantics.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Real fill = Real(0));
    Tensor(Shape shape, std::vector<Real> data);

    static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }
    static Tensor vector(std::initializer_list<Real> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<Real> data() { return data_; }
    std::span<const Real> data() const { return data_; }
    Real* ptr() { return data_.data(); }
    const Real* ptr() const { return data_.data(); }
    std::vector<Real>& storage() { return data_; }
    const std::vector<Real>& storage() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    /// Value of a single-element tensor.
    Real item() const;

    Tensor reshaped(Shape shape) const;
    bool all_finite() const;
    void fill(Real v);

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(Real s);

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<Real> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, Real s);

Real max_abs_diff(const Tensor& a, const Tensor& b);
Real l2_norm(std::span<const Real> v);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace robnas
