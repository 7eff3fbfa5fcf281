#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "polyv/tape.hpp"
#include "polyv/tensor.hpp"

namespace polyv {

// Gated feed-forward expert: down(silu(x*w_gate) (.) (x*w_up)) * w_down.
struct ExpertFfn {
  Tensor w_gate;  // d_model x d_hidden
  Tensor w_up;    // d_model x d_hidden
  Tensor w_down;  // d_hidden x d_model

  std::size_t d_model() const { return w_gate.rows(); }
  std::size_t d_hidden() const { return w_gate.cols(); }
  void validate() const;  // DimensionError when the three matrices disagree

  static ExpertFfn zeros(std::size_t d_model, std::size_t d_hidden);
  static ExpertFfn random(std::size_t d_model, std::size_t d_hidden, Rng& rng, double stddev);
};

// Pure linear router (no bias): logits = x * w_router.
struct Router {
  Tensor w_router;  // d_model x M
};

struct MoeLayer {
  Router router;
  std::vector<ExpertFfn> experts;
  std::size_t top_k = 2;
  // Top-k outputs can be mixed by raw softmax probabilities or by the same
  // probabilities renormalized over the selected experts; renormalized is
  // the default, the raw variant stays available for ablation.
  bool renormalize_weights = true;

  std::size_t num_experts() const { return experts.size(); }
  void validate() const;
};

// Routing decisions for one batch, plus the instrumentation proving the
// sparsity contract (eval_counts[e] = tokens dispatched to expert e; the sum
// over experts is exactly tokens * k).
struct RoutingRecord {
  Tensor probs;                                     // tokens x M, rows sum to 1
  std::vector<std::vector<std::size_t>> selected;   // per token, k distinct experts
  Tensor weights;                                   // tokens x k mixing weights
  std::vector<std::size_t> eval_counts;             // per expert, filled by moe_forward
};

enum class PlacementMode { kFirstHalf, kLastHalf, kInterval, kFull };

struct LayerSchedule {
  std::size_t total_layers = 0;
  std::vector<std::size_t> moe_layer_indices;  // sorted, unique, < total_layers
  PlacementMode mode = PlacementMode::kFull;
  std::size_t interval = 0;  // populated for kInterval

  bool is_moe(std::size_t layer) const;
};

// Per-token top-k from a probability row: k largest entries, ties broken
// toward the lowest index, returned in descending-probability order.
std::vector<std::size_t> top_k_indices(const double* row, std::size_t m, std::size_t k);

// probs = softmax(x * w_router); selected = top-k; weights = selected probs,
// renormalized to sum 1 unless the layer requests the raw variant.
RoutingRecord route(const Tensor& x, const MoeLayer& layer);

Tensor expert_forward(const Tensor& x, const ExpertFfn& e);
NodeId expert_forward_tape(Tape& tape, NodeId x, ExpertFfn& e);

// Sparse dispatch: only selected experts run, each on its gathered sub-batch.
std::pair<Tensor, RoutingRecord> moe_forward(const Tensor& x, const MoeLayer& layer);

struct MoeTapeResult {
  NodeId y;
  NodeId probs;  // softmax node feeding the load-balance loss
  RoutingRecord record;
};
MoeTapeResult moe_forward_tape(Tape& tape, NodeId x, MoeLayer& layer);

// F_i = fraction of tokens whose argmax row lands on expert i (ties to the
// lowest index); G_i = column mean of probs.
std::vector<double> argmax_fractions(const Tensor& probs);
std::vector<double> mean_probs(const Tensor& probs);

// M * sum_i F_i * G_i. The tape variant differentiates through G only; F is
// a constant coefficient vector.
double load_balance_loss(const RoutingRecord& record);
NodeId load_balance_loss_tape(Tape& tape, NodeId probs_node);

// Smallest gap between the k-th and (k+1)-th routing probability over all
// tokens; large when k = M. Used by gradient checks to stay away from ties.
double min_topk_margin(const Tensor& probs, std::size_t k);

// Each expert is the dense FFN plus seeded Gaussian noise of the given
// stddev; the router starts at zero so routing begins uniform.
MoeLayer upcycle_from_dense(const ExpertFfn& dense, std::size_t M, double noise_scale,
                            std::uint64_t seed, std::size_t top_k = 2);

LayerSchedule build_schedule(std::size_t total_layers, PlacementMode mode, std::size_t interval = 0);
// Mode strings: "first_half", "last_half", "interval(n)", "full".
LayerSchedule build_schedule(std::size_t total_layers, const std::string& mode);
std::string placement_mode_name(const LayerSchedule& schedule);

// Rows `layer,expert,token_fraction,mean_prob`, one per (layer, expert);
// token fractions per layer sum to 1.
void write_routing_csv(std::ostream& os, const std::vector<std::size_t>& layer_indices,
                       const std::vector<RoutingRecord>& records);

}  // namespace polyv
