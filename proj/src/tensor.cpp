#include "robnas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "robnas/kernels.hpp"

namespace robnas {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
    for (auto e : shape_)
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    if (shape_numel(shape_) != data_.size())
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor Tensor::vector(std::initializer_list<Real> values) {
    return Tensor(Shape{values.size()}, std::vector<Real>(values));
}

Real Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "operator+=");
    kernels::axpy(data_.size(), Real(1), other.ptr(), data_.data());
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "operator-=");
    kernels::axpy(data_.size(), Real(-1), other.ptr(), data_.data());
    return *this;
}

Tensor& Tensor::operator*=(Real s) {
    for (auto& v : data_) v *= s;
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, Real s) { return a *= s; }

Real max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    Real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Real l2_norm(std::span<const Real> v) {
    return std::sqrt(kernels::dot(v.size(), v.data(), v.data()));
}

}  // namespace robnas
