#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "polyv/moe.hpp"
#include "polyv/synergy.hpp"
#include "polyv/tape.hpp"
#include "polyv/tensor.hpp"

namespace polyv {

// Desk-scale dimensions chosen so every invariant is testable in
// milliseconds; every field is config-exposed and scales up freely.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t d_model = 16;
  std::size_t d_hidden = 64;
  std::size_t d_vis = 12;
  std::size_t vocab = 64;
  std::size_t heads = 2;
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::string placement = "interval(2)";
  std::size_t synergy_tokens = 4;
  std::size_t d_align_t = 12;
  std::size_t d_align_g = 10;
  std::size_t d_align_hidden = 16;
  double init_std = 0.05;
  double ln_eps = 1e-5;
  bool renormalize_weights = true;

  void validate() const;
  LayerSchedule schedule() const;
};

struct AttentionParams {
  Tensor w_query, w_key, w_value, w_out;  // each d_model x d_model
};

struct Block {
  AttentionParams attn;
  Tensor ln1_gain, ln1_bias;  // pre-attention norm
  Tensor ln2_gain, ln2_bias;  // pre-FFN norm
  ExpertFfn dense_ffn;        // active until upcycling replaces it on MoE blocks
  std::optional<MoeLayer> moe;

  bool is_moe() const { return moe.has_value(); }
};

struct ToyModel {
  ModelConfig cfg;
  LayerSchedule schedule;
  Tensor visual_projector;    // d_vis x d_model
  Tensor token_embedding;     // vocab x d_model
  std::vector<Block> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head;                // d_model x vocab
  Tensor synergy_embeddings;  // synergy_tokens x d_model
  AlignmentProjector alignment;
  bool upcycled = false;
};

enum class ParamGroup {
  kProjector = 0,
  kAttention,
  kLayerNorm,
  kEmbedding,
  kHead,
  kFfnExperts,
  kRouter,
  kAlignment,
};
inline constexpr std::size_t kNumParamGroups = 8;
const char* param_group_name(ParamGroup g);
ParamGroup param_group_from_name(const std::string& name);

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor* tensor;
};

ToyModel build_toy_model(const ModelConfig& cfg, std::uint64_t seed);

// Converts every scheduled block from its dense FFN to an MoE layer whose
// experts copy the dense weights (plus optional noise); routers start at
// zero. The dense weights are dropped from the converted blocks.
void upcycle_model(ToyModel& model, double noise_scale, std::uint64_t seed);

// Stable enumeration: every parameter appears exactly once with its group.
std::vector<NamedParam> enumerate_params(ToyModel& model);

struct ForwardResult {
  NodeId logits = 0;                     // (P + T + S) x vocab
  NodeId synergy = 0;                    // S x d_model, valid when has_synergy
  bool has_synergy = false;
  std::vector<std::size_t> synergy_mask;
  std::vector<NodeId> moe_probs;         // per MoE block, in layer order
  std::vector<std::size_t> moe_layers;
  std::vector<RoutingRecord> records;
  std::size_t visual_len = 0;
  std::size_t prefix_len = 0;            // P + T, start of synergy positions
};

// X_0 = [H, T] plus appended synergy tokens; per block pre-norm causal MSA
// and FFN/MoE residuals; final layer norm feeds the output head and the
// synergy slice. visual may have zero rows; synergy_count may be 0.
ForwardResult model_forward(Tape& tape, ToyModel& model, const Tensor& visual,
                            const std::vector<int>& text_ids, std::size_t synergy_count);

// Text checkpoint: header line, then one name line + tensor text per
// parameter. Loading restores values into a model built from the same
// config; an upcycled checkpoint upcycles the target model (noise 0) first.
void save_model(const std::string& path, ToyModel& model);
void load_model(const std::string& path, ToyModel& model);

}  // namespace polyv
