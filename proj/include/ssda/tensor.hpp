#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssda {

using Shape = std::vector<int>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
long long shape_numel(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer of the
/// same length. Gradients are allocated lazily via ensure_grad().
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> v);

  int numel() const { return static_cast<int>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool has_grad() const { return grad.size() == values.size() && !values.empty(); }
  void ensure_grad();
  void zero_grad();

  double& operator[](int i) { return values[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return values[static_cast<std::size_t>(i)]; }

  void check_finite(const std::string& context) const;
};

/// Named learnable tensor. Trainable parameters accumulate gradients into
/// tensor.grad during backward passes.
struct Parameter {
  Tensor tensor;
  std::string name;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor t, bool train = true);

  void ensure_grad() { tensor.ensure_grad(); }
  void zero_grad() { tensor.zero_grad(); }
};

void require_shape(const Tensor& t, const Shape& expected, const std::string& context);
void require_same_shape(const Tensor& a, const Tensor& b, const std::string& context);

}  // namespace ssda
