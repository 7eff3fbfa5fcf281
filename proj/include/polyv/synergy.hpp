#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "polyv/tape.hpp"
#include "polyv/tensor.hpp"

namespace polyv {

// Bias-free two-layer MLP, SiLU between layers, no output activation. The
// activation can be disabled to make a square projector exactly linear.
struct TwoLayerMlp {
  Tensor w1;  // d_in x d_mid
  Tensor w2;  // d_mid x d_out
  bool use_activation = true;

  std::size_t d_in() const { return w1.rows(); }
  std::size_t d_out() const { return w2.cols(); }
  void validate() const;

  Tensor forward(const Tensor& x) const;
  NodeId forward_tape(Tape& tape, NodeId x);

  static TwoLayerMlp zeros(std::size_t d_in, std::size_t d_mid, std::size_t d_out);
  static TwoLayerMlp random(std::size_t d_in, std::size_t d_mid, std::size_t d_out, Rng& rng,
                            double stddev);
};

// Maps the synergy hidden slice into the two teacher feature spaces.
struct AlignmentProjector {
  TwoLayerMlp temporal;  // d_model -> d_align_t
  TwoLayerMlp spatial;   // d_model -> d_align_g
};

struct TeacherFeatures {
  Tensor temporal;  // S x d_align_t
  Tensor spatial;   // S x d_align_g
};

struct LossWeights {
  double alpha = 0.0;  // multiplies the load-balance term
  void validate() const;
};

struct SynergyInsertion {
  Tensor sequence;                 // (T + S) x d_model
  std::vector<std::size_t> mask;   // the S inserted positions
};

// Appends the S learned embeddings after the given prefix; mask holds their
// positions T .. T+S-1.
SynergyInsertion insert_synergy_tokens(const Tensor& sequence, const Tensor& embeddings);
NodeId insert_synergy_tokens_tape(Tape& tape, NodeId sequence, Tensor& embeddings,
                                  std::vector<std::size_t>& mask_out);

// Both projections read the same slice through independent parameters.
std::pair<Tensor, Tensor> project_synergy(const Tensor& slice, const AlignmentProjector& proj);
std::pair<NodeId, NodeId> project_synergy_tape(Tape& tape, NodeId slice, AlignmentProjector& proj);

// Sum-of-squares distillation gap against both teachers.
double coarse_loss(const Tensor& f_v, const Tensor& f_g, const TeacherFeatures& teachers);
NodeId coarse_loss_tape(Tape& tape, NodeId f_v, NodeId f_g, const TeacherFeatures& teachers);

// coarse + alpha * aux.
double total_stage2_loss(double coarse, double aux, const LossWeights& w);
NodeId total_stage2_loss_tape(Tape& tape, NodeId coarse, NodeId aux, const LossWeights& w);

// Seeded stand-in for the frozen video/3D feature teachers: unit-L2 rows,
// deterministic per (seed, kind, dims). kind is "temporal" or "spatial".
Tensor mock_teacher(std::uint64_t seed, const std::string& kind, std::size_t rows, std::size_t dim);
TeacherFeatures make_mock_teachers(std::uint64_t seed, std::size_t rows, std::size_t d_temporal,
                                   std::size_t d_spatial);

}  // namespace polyv
