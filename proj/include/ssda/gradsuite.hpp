#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssda {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

/// Runs central-finite-difference checks (epsilon 1e-5) for every
/// differentiable operation in the repository, each over `seeds_per_case`
/// random seeds; reports the worst error per case.
std::vector<GradCheckCase> run_gradient_suite(int seeds_per_case, std::uint64_t root_seed);

}  // namespace ssda
