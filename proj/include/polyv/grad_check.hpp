#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "polyv/tensor.hpp"

namespace polyv {

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

// Scalar objective over the referenced parameters. Must read current
// parameter values on every call; when `backward` is set it must also run the
// reverse pass so gradients land in each parameter's grad buffer (the checker
// zeroes them first).
using Objective = std::function<double(bool backward)>;

struct GradCheckOptions {
  double eps = 1e-5;  // central-difference step; must lie in [1e-7, 1e-3]
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // picked deterministically from subsample_seed. Keeps large paths inside
  // the wall-clock budget without losing coverage across seeds.
  std::size_t max_coords_per_param = 0;
  std::uint64_t subsample_seed = 1;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Central finite differences per coordinate against the analytic gradient:
// reports max over coordinates of |analytic - numeric| / max(1, |numeric|).
// The objective is evaluated twice up front and once after the reverse pass;
// any bitwise disagreement between those values raises OracleError, since a
// non-deterministic objective invalidates the finite-difference estimate.
GradCheckResult grad_check(const Objective& f, const std::vector<ParamRef>& params,
                           const GradCheckOptions& opts = {});

}  // namespace polyv
