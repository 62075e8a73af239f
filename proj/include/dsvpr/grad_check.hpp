#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dsvpr/tensor.hpp"

namespace dsvpr {

struct GradReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::map<std::string, double> per_parameter_errors;
};

struct GradCheckOptions {
  // Base central-difference step. Accepted range is [1e-6, 1e-3]; anything
  // outside trades truncation error for cancellation error badly enough
  // that the report stops meaning anything. Every coordinate is also probed
  // one decade above and below (clamped to the accepted range) and keeps its
  // best agreement, since derivative scales inside a deep composition vary
  // too widely for one step to suit them all.
  double h = 1e-5;
  // Upper bound on probed coordinates per parameter tensor. 0 checks every
  // coordinate. Large models are checked on a deterministic subsample so
  // the probe count stays proportional to parameter count, not element
  // count.
  std::int64_t max_coords_per_param = 0;
  std::uint64_t seed = 7;
};

// Compares analytic gradients of a scalar-valued function against central
// finite differences. `f` must rebuild its graph from the current parameter
// values on every call; the checker perturbs the parameter storage in place
// between evaluations. Relative error per coordinate is
// |a - n| / max(|a|, |n|, 1e-8), and each parameter reports its worst
// coordinate. Throws EvaluationError if any evaluation is non-finite.
GradReport grad_check(const std::function<Tensor()>& f,
                      const std::vector<std::pair<std::string, Tensor>>& params,
                      const GradCheckOptions& options = {});

}  // namespace dsvpr
