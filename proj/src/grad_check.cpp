#include "ssda/grad_check.hpp"

#include <cmath>
#include <vector>

namespace ssda {

double grad_check(const std::function<double()>& loss, const std::function<void()>& backward,
                  std::span<Tensor* const> inputs, double epsilon) {
  if (epsilon <= 0.0) {
    throw ConfigError("grad_check: epsilon must be positive");
  }
  backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    if (!t->has_grad()) {
      throw NumericError("grad_check: backward left no gradient on an input");
    }
    analytic.push_back(t->grad);
  }

  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor* t = inputs[ti];
    for (std::size_t i = 0; i < t->values.size(); ++i) {
      const double orig = t->values[i];
      t->values[i] = orig + epsilon;
      const double up = loss();
      t->values[i] = orig - epsilon;
      const double down = loss();
      t->values[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite probe at input " + std::to_string(ti) +
                           " entry " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[ti][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ssda
