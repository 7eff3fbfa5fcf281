#include "polyv/synergy.hpp"

#include <cmath>

#include "polyv/error.hpp"
#include "polyv/kernels.hpp"

namespace polyv {

void TwoLayerMlp::validate() const {
  if (w1.ndim() != 2 || w2.ndim() != 2 || w1.cols() != w2.rows()) {
    throw DimensionError("MLP dims disagree: " + w1.shape_str() + " then " + w2.shape_str());
  }
}

Tensor TwoLayerMlp::forward(const Tensor& x) const {
  validate();
  if (x.ndim() != 2 || x.cols() != d_in()) {
    throw DimensionError("MLP input must be rows x " + std::to_string(d_in()) + ", got " + x.shape_str());
  }
  Tensor h({x.rows(), w1.cols()});
  kernels::matmul_nn(x.rows(), x.cols(), w1.cols(), x.data(), w1.data(), h.data());
  if (use_activation) kernels::silu(h.numel(), h.data(), h.data());
  Tensor y({x.rows(), w2.cols()});
  kernels::matmul_nn(h.rows(), h.cols(), w2.cols(), h.data(), w2.data(), y.data());
  return y;
}

NodeId TwoLayerMlp::forward_tape(Tape& tape, NodeId x) {
  validate();
  NodeId h = tape.matmul(x, tape.param(w1));
  if (use_activation) h = tape.silu(h);
  return tape.matmul(h, tape.param(w2));
}

TwoLayerMlp TwoLayerMlp::zeros(std::size_t d_in, std::size_t d_mid, std::size_t d_out) {
  TwoLayerMlp m;
  m.w1 = Tensor({d_in, d_mid});
  m.w2 = Tensor({d_mid, d_out});
  return m;
}

TwoLayerMlp TwoLayerMlp::random(std::size_t d_in, std::size_t d_mid, std::size_t d_out, Rng& rng,
                                double stddev) {
  TwoLayerMlp m;
  m.w1 = Tensor::randn({d_in, d_mid}, rng, stddev);
  m.w2 = Tensor::randn({d_mid, d_out}, rng, stddev);
  return m;
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ParameterError("loss weight alpha must be finite and nonnegative");
  }
}

SynergyInsertion insert_synergy_tokens(const Tensor& sequence, const Tensor& embeddings) {
  if (sequence.ndim() != 2 || embeddings.ndim() != 2 || sequence.cols() != embeddings.cols()) {
    throw DimensionError("synergy insertion shape mismatch: " + sequence.shape_str() + " vs " +
                         embeddings.shape_str());
  }
  if (embeddings.rows() < 1) throw ParameterError("need at least one synergy token");
  std::size_t t = sequence.rows(), s = embeddings.rows(), d = sequence.cols();
  SynergyInsertion out;
  out.sequence = Tensor({t + s, d});
  std::copy_n(sequence.data(), sequence.numel(), out.sequence.data());
  std::copy_n(embeddings.data(), embeddings.numel(), out.sequence.data() + sequence.numel());
  out.mask.resize(s);
  for (std::size_t i = 0; i < s; ++i) out.mask[i] = t + i;
  return out;
}

NodeId insert_synergy_tokens_tape(Tape& tape, NodeId sequence, Tensor& embeddings,
                                  std::vector<std::size_t>& mask_out) {
  const Tensor& seq = tape.value(sequence);
  if (embeddings.ndim() != 2 || embeddings.rows() < 1 || seq.cols() != embeddings.cols()) {
    throw DimensionError("synergy insertion shape mismatch: " + seq.shape_str() + " vs " +
                         embeddings.shape_str());
  }
  mask_out.resize(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) mask_out[i] = seq.rows() + i;
  return tape.concat_rows(sequence, tape.param(embeddings));
}

std::pair<Tensor, Tensor> project_synergy(const Tensor& slice, const AlignmentProjector& proj) {
  return {proj.temporal.forward(slice), proj.spatial.forward(slice)};
}

std::pair<NodeId, NodeId> project_synergy_tape(Tape& tape, NodeId slice, AlignmentProjector& proj) {
  return {proj.temporal.forward_tape(tape, slice), proj.spatial.forward_tape(tape, slice)};
}

double coarse_loss(const Tensor& f_v, const Tensor& f_g, const TeacherFeatures& teachers) {
  if (!f_v.same_shape(teachers.temporal)) {
    throw DimensionError("temporal projection " + f_v.shape_str() + " vs teacher " +
                         teachers.temporal.shape_str());
  }
  if (!f_g.same_shape(teachers.spatial)) {
    throw DimensionError("spatial projection " + f_g.shape_str() + " vs teacher " +
                         teachers.spatial.shape_str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < f_v.numel(); ++i) {
    double d = teachers.temporal.at(i) - f_v.at(i);
    acc += d * d;
  }
  for (std::size_t i = 0; i < f_g.numel(); ++i) {
    double d = teachers.spatial.at(i) - f_g.at(i);
    acc += d * d;
  }
  return acc;
}

NodeId coarse_loss_tape(Tape& tape, NodeId f_v, NodeId f_g, const TeacherFeatures& teachers) {
  NodeId lt = tape.mse(tape.constant(teachers.temporal), f_v);
  NodeId lg = tape.mse(tape.constant(teachers.spatial), f_g);
  return tape.add(lt, lg);
}

double total_stage2_loss(double coarse, double aux, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(coarse) || !std::isfinite(aux)) {
    throw ParameterError("stage-2 loss components must be finite");
  }
  return coarse + w.alpha * aux;
}

NodeId total_stage2_loss_tape(Tape& tape, NodeId coarse, NodeId aux, const LossWeights& w) {
  w.validate();
  return tape.add(coarse, tape.scale(aux, w.alpha));
}

Tensor mock_teacher(std::uint64_t seed, const std::string& kind, std::size_t rows, std::size_t dim) {
  if (kind != "temporal" && kind != "spatial") {
    throw ParameterError("teacher kind must be temporal or spatial, got '" + kind + "'");
  }
  if (rows < 1 || dim < 1) throw ParameterError("teacher dims must be positive");
  Rng rng(substream(seed, "teacher:" + kind));
  Tensor t({rows, dim});
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    while (norm < 1e-12) {  // redraw the vanishing row; practically never loops
      norm = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        t.at(r, c) = rng.normal();
        norm += t.at(r, c) * t.at(r, c);
      }
      norm = std::sqrt(norm);
    }
    for (std::size_t c = 0; c < dim; ++c) t.at(r, c) /= norm;
  }
  return t;
}

TeacherFeatures make_mock_teachers(std::uint64_t seed, std::size_t rows, std::size_t d_temporal,
                                   std::size_t d_spatial) {
  TeacherFeatures t;
  t.temporal = mock_teacher(seed, "temporal", rows, d_temporal);
  t.spatial = mock_teacher(seed, "spatial", rows, d_spatial);
  return t;
}

}  // namespace polyv
