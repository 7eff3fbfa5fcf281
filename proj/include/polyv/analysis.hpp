#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "polyv/trainer.hpp"

namespace polyv {

// One differentiable path checked against central finite differences.
struct GradPathResult {
  std::string path;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  bool pass = false;
  std::string worst_param;
};

// Runs every path: each tape primitive in isolation (tol 1e-6), the gated
// expert FFN, the alignment projectors, the full top-k MoE layer, and an
// end-to-end two-block model with CE + coarse + alpha * aux (1e-4 through
// the top-k compositions). Deterministic per seed. `corrupt_op` names a
// primitive whose backward is deliberately skewed for the fault-injection
// fixture; empty means run clean.
std::vector<GradPathResult> run_grad_suite(std::uint64_t seed, double eps, std::size_t max_coords,
                                           const std::string& corrupt_op = "");

// Per-layer expert shares at the final logged step of a run directory.
struct RouteStats {
  std::size_t step = 0;
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> fractions;   // [layer][expert]
  std::vector<std::vector<double>> mean_probs;  // [layer][expert]
  double max_share = 0.0;
  double min_share = 0.0;
  double lb_loss = 0.0;  // mean over layers of M * sum F_i G_i
};

RouteStats compute_route_stats(const std::string& run_dir);
void write_route_stats_csv(const RouteStats& stats, const std::string& path);
std::string route_stats_summary(const RouteStats& stats);

// One trained variant of an ablation grid.
struct AblateRow {
  std::string axis;     // experts | placement
  std::string variant;  // M=2 .. / first_half ..
  std::size_t moe_layers = 0;
  double final_loss = 0.0;
  double final_aux = 0.0;  // alpha-weighted aux term at the last step
  double max_share = 0.0;
  double min_share = 0.0;
};

// experts: M in {2,3,4} at interval(4); placement: the four schedule modes.
// Every variant trains ablate_steps updates at ablate_layers blocks.
std::vector<AblateRow> run_ablation(const RunConfig& base, const std::string& axis);
void write_ablation_csv(const std::vector<AblateRow>& rows, const std::string& path);

}  // namespace polyv
