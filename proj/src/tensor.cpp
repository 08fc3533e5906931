#include "pinet/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace pinet {

std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out << ',';
        out << shape[i];
    }
    out << ')';
    return out.str();
}

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

namespace {
void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (std::size_t extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    values_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, const std::vector<double>& values)
    : Tensor(std::move(shape), AlignedValues(values.begin(), values.end())) {}

Tensor::Tensor(Shape shape, AlignedValues values) : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape(shape_);
    if (values_.size() != element_count(shape_)) {
        throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                         std::to_string(element_count(shape_)) + " values, got " +
                         std::to_string(values_.size()));
    }
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
    return Tensor(std::move(shape), AlignedValues(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
    }
    return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
        throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), values_);
}

Tensor Tensor::slice(std::size_t begin, std::size_t count) const {
    if (count == 0 || begin + count > dim(0)) {
        throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for shape " + to_string(shape_));
    }
    const std::size_t inner = size() / shape_[0];
    Shape shape = shape_;
    shape[0] = count;
    return Tensor(std::move(shape),
                  AlignedValues(values_.begin() + begin * inner,
                                      values_.begin() + (begin + count) * inner));
}

void Tensor::assign_slice(std::size_t begin, const Tensor& block) {
    const std::size_t inner = size() / dim(0);
    if (block.size() % inner != 0 || begin * inner + block.size() > size()) {
        throw ShapeError("cannot assign block " + to_string(block.shape()) + " into " +
                         to_string(shape_) + " at " + std::to_string(begin));
    }
    std::copy(block.values_.begin(), block.values_.end(), values_.begin() + begin * inner);
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
    return *this;
}

Tensor& Tensor::operator*=(double factor) {
    for (double& v : values_) v *= factor;
    return *this;
}

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (values_.empty() ||
            std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0);
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double factor) { return a *= factor; }
Tensor operator*(double factor, Tensor a) { return a *= factor; }

double sum(const Tensor& t) {
    double total = 0.0;
    for (double v : t.values()) total += v;
    return total;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += a[i] * b[i];
    return total;
}

double norm2(const Tensor& t) { return std::sqrt(dot(t, t)); }

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.values()) m = std::max(m, std::abs(v));
    return m;
}

double max_value(const Tensor& t) { return *std::max_element(t.values().begin(), t.values().end()); }
double min_value(const Tensor& t) { return *std::min_element(t.values().begin(), t.values().end()); }

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    Shape shape{parts.size()};
    shape.insert(shape.end(), parts[0].shape().begin(), parts[0].shape().end());
    Tensor out(shape);
    const std::size_t inner = parts[0].size();
    for (std::size_t i = 0; i < parts.size(); ++i) {
        require_same_shape(parts[0], parts[i], "stack");
        std::copy(parts[i].data(), parts[i].data() + inner, out.data() + i * inner);
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
    }
}

}  // namespace pinet
