#pragma once

#include <functional>
#include <span>

#include "ssda/tensor.hpp"

namespace ssda {

/// Compares a hand-written backward pass against central finite differences.
///
/// `loss` recomputes the scalar objective from the current values of `inputs`;
/// `backward` runs the analytic pass, leaving a full gradient in each input's
/// grad buffer. Returns the max over all input entries of
/// |analytic - numeric| / max(1, |analytic|). Throws NumericError if any probe
/// produces a non-finite value, naming the offending entry.
double grad_check(const std::function<double()>& loss, const std::function<void()>& backward,
                  std::span<Tensor* const> inputs, double epsilon);

}  // namespace ssda
