#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace moe_snnl {

using Real = double;
using Shape = std::vector<std::size_t>;
using Labels = std::vector<int>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array with an optional gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    values_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Real> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape();
    if (numel(shape_) != values_.size()) {
      throw DimensionError("tensor shape " + moe_snnl::to_string(shape_) + " holds " +
                           std::to_string(numel(shape_)) + " values, got " +
                           std::to_string(values_.size()));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool is_scalar() const { return values_.size() == 1 && shape_.empty(); }

  std::vector<Real>& values() { return values_; }
  const std::vector<Real>& values() const { return values_; }
  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real item() const {
    if (values_.size() != 1) throw DimensionError("item() on tensor of shape " + moe_snnl::to_string(shape_));
    return values_[0];
  }

  /// Row-major element access for rank-2 tensors.
  Real& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  Real at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  bool has_grad() const { return grad_.has_value(); }
  std::vector<Real>& grad() {
    if (!grad_) grad_.emplace(values_.size(), 0.0);
    return *grad_;
  }
  const std::optional<std::vector<Real>>& grad_opt() const { return grad_; }
  void clear_grad() { grad_.reset(); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != values_.size()) {
      throw DimensionError("cannot reshape " + moe_snnl::to_string(shape_) + " to " + moe_snnl::to_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  bool all_finite() const {
    for (Real v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dims must be positive, got " + moe_snnl::to_string(shape_));
  }

  Shape shape_;
  std::vector<Real> values_ = std::vector<Real>(1, 0.0);
  std::optional<std::vector<Real>> grad_;
};

/// Trainable tensor plus its optimizer state.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor tensor_, bool decay_ = true)
      : tensor(std::move(tensor_)),
        momentum_buffer(tensor.size(), 0.0),
        name(std::move(name_)),
        weight_decay(decay_) {}

  Tensor tensor;
  std::vector<Real> momentum_buffer;
  std::string name;
  /// Biases and normalization affine terms are excluded from L2 decay.
  bool weight_decay = true;
};

}  // namespace moe_snnl
