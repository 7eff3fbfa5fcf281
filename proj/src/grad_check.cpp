#include "polyv/grad_check.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "polyv/error.hpp"
#include "polyv/rng.hpp"

namespace polyv {

namespace {

bool bits_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

// Deterministic pick of `count` distinct indices out of [0, n): partial
// Fisher-Yates keyed by the option seed and the parameter name.
std::vector<std::size_t> pick_coords(std::size_t n, std::size_t count, std::uint64_t seed,
                                     const std::string& name) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (count >= n) return idx;
  Rng rng(substream(seed, "grad-subsample:" + name));
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace

GradCheckResult grad_check(const Objective& f, const std::vector<ParamRef>& params,
                           const GradCheckOptions& opts) {
  if (!f) throw ParameterError("grad_check objective is empty");
  if (opts.eps < 1e-7 || opts.eps > 1e-3) {
    throw ParameterError("grad_check eps must lie in [1e-7, 1e-3]");
  }
  for (const ParamRef& p : params) {
    if (p.tensor == nullptr) throw ParameterError("grad_check parameter '" + p.name + "' is null");
  }

  // Determinism gate: the finite-difference estimate assumes f is a pure
  // function of the parameter values.
  double v1 = f(false);
  double v2 = f(false);
  if (!bits_equal(v1, v2)) {
    throw OracleError("objective is non-deterministic: repeated evaluation gave " +
                      std::to_string(v1) + " then " + std::to_string(v2));
  }

  // Analytic gradients.
  for (const ParamRef& p : params) {
    p.tensor->grad();  // allocate
    p.tensor->zero_grad();
  }
  double v3 = f(true);
  if (!bits_equal(v1, v3)) {
    throw OracleError("objective value changed when the reverse pass was enabled");
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const ParamRef& p : params) analytic.push_back(p.tensor->grad());

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = *params[pi].tensor;
    std::size_t n = t.numel();
    std::vector<std::size_t> coords =
        (opts.max_coords_per_param > 0 && n > opts.max_coords_per_param)
            ? pick_coords(n, opts.max_coords_per_param, opts.subsample_seed, params[pi].name)
            : pick_coords(n, n, 0, params[pi].name);
    for (std::size_t c : coords) {
      double saved = t.at(c);
      t.at(c) = saved + opts.eps;
      double fp = f(false);
      t.at(c) = saved - opts.eps;
      double fm = f(false);
      t.at(c) = saved;
      double numeric = (fp - fm) / (2.0 * opts.eps);
      double a = analytic[pi][c];
      double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coords_checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = params[pi].name;
        result.worst_coord = c;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace polyv
