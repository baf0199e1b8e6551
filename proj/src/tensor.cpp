#include "ssda/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ssda {

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

long long shape_numel(const Shape& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    }
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), values(static_cast<std::size_t>(shape_numel(shape)), fill) {}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != static_cast<long long>(values.size())) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) {
    grad.assign(values.size(), 0.0);
  }
}

void Tensor::zero_grad() {
  if (!grad.empty()) {
    std::fill(grad.begin(), grad.end(), 0.0);
  }
}

void Tensor::check_finite(const std::string& context) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(context + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

Parameter::Parameter(std::string n, Tensor t, bool train)
    : tensor(std::move(t)), name(std::move(n)), trainable(train) {}

void require_shape(const Tensor& t, const Shape& expected, const std::string& context) {
  if (t.shape != expected) {
    throw DimensionError(context + ": expected shape " + shape_str(expected) + ", got " +
                         shape_str(t.shape));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& context) {
  if (a.shape != b.shape) {
    throw DimensionError(context + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

}  // namespace ssda
