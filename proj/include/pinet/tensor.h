#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pinet {

using Shape = std::vector<std::size_t>;

/// Raised for inconsistent extents, ranks or axis arguments.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Storage aligned for the widest vector unit so vectorised reductions sum in the
/// same order on every run.
using AlignedValues = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense row-major array of doubles. Value semantics; copies are deep.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, const std::vector<double>& values);
    Tensor(Shape shape, AlignedValues values);

    static Tensor scalar(double value) { return Tensor({1}, value); }
    static Tensor from(Shape shape, std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }
    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return values_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return values_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    /// Same elements under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    /// Copy of the contiguous block [begin, begin + count) along axis 0.
    Tensor slice(std::size_t begin, std::size_t count) const;
    /// Writes `block` into positions [begin, ...) along axis 0.
    void assign_slice(std::size_t begin, const Tensor& block);

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double factor);

    bool all_finite() const;
    /// Bitwise equality of shapes and payloads.
    bool identical(const Tensor& other) const;

  private:
    Shape shape_;
    AlignedValues values_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double factor);
Tensor operator*(double factor, Tensor a);

double sum(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& t);
double max_abs(const Tensor& t);
double max_value(const Tensor& t);
double min_value(const Tensor& t);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

}  // namespace pinet
