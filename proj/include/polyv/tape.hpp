#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "polyv/tensor.hpp"

namespace polyv {

using NodeId = std::size_t;

enum class OpKind {
  kConstant,
  kParam,
  kMatMul,     // a[m x k] * b[k x n]
  kMatMulNT,   // a[m x k] * b[n x k]^T
  kAdd,
  kSub,
  kMul,        // elementwise
  kScale,      // scalar * a
  kSilu,
  kSoftmax,    // along `axis` (1-D or 2-D input)
  kLayerNorm,  // last axis; inputs x, gain, bias
  kSum,        // full reduction to scalar
  kMse,        // sum of squared differences
  kCrossEntropy,
  kGatherRows,
  kScatterRows,
  kGatherColsPerRow,
  kRowNormalize,
  kScaleRows,
  kSliceRows,
  kSliceCols,
  kConcatRows,
  kConcatCols,
  kMeanCols,
  kDotConst,
};

const char* op_name(OpKind kind);

// Test hook: names an op whose backward pass is deliberately skewed (incoming
// gradient scaled by 1.01) so gradient checks must fail through it. Empty
// string disables. Used only by fault-injection fixtures.
void set_backward_corruption(std::string op);
const std::string& backward_corruption();

// One recorded primitive application. Inputs are node ids that precede this
// node (topological order by construction); `value` is the forward output.
struct TapeNode {
  OpKind kind;
  std::vector<NodeId> inputs;
  Tensor value;

  double scalar = 0.0;                                // kScale factor, layer-norm eps, dot-const scale
  std::size_t axis = 0;                               // softmax axis
  std::size_t lo = 0, hi = 0;                         // slices; scatter total_rows in hi
  std::vector<int> targets;                           // cross-entropy class ids
  std::vector<std::size_t> row_index;                 // gather/scatter rows
  std::vector<std::vector<std::size_t>> col_index;    // per-row column picks
  std::vector<double> coeffs;                         // dot-const coefficients
  Tensor* bound = nullptr;                            // kParam external storage
  Tensor saved, saved2;                               // backward context (probs, normed, rstd)
};

// Reverse-mode tape. Values are computed eagerly as ops are recorded; the
// record is replayable and backward() walks it in reverse. One tape per
// forward pass; not thread safe across concurrent mutation.
class Tape {
 public:
  NodeId constant(Tensor v);
  // Leaf bound to external storage; backward accumulates into storage.grad.
  // Binding the same tensor twice returns the same node.
  NodeId param(Tensor& storage);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId silu(NodeId x);
  NodeId softmax(NodeId x, std::size_t axis);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps);
  NodeId sum(NodeId x);
  NodeId mse(NodeId a, NodeId b);
  NodeId cross_entropy(NodeId logits, std::vector<int> targets);
  NodeId gather_rows(NodeId x, std::vector<std::size_t> rows);
  NodeId scatter_rows(NodeId x, std::vector<std::size_t> rows, std::size_t total_rows);
  NodeId gather_cols_per_row(NodeId x, std::vector<std::vector<std::size_t>> cols);
  NodeId row_normalize(NodeId x);
  NodeId scale_rows(NodeId x, NodeId w);
  NodeId slice_rows(NodeId x, std::size_t lo, std::size_t hi);
  NodeId slice_cols(NodeId x, std::size_t lo, std::size_t hi);
  NodeId concat_rows(NodeId a, NodeId b);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId mean_cols(NodeId x);
  // scale * sum_i coeffs[i] * x[i]; coeffs are constants (no gradient).
  NodeId dot_const(NodeId x, std::vector<double> coeffs, double scale);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }

  // Reverse traversal from a scalar root. Populates grad on every bound
  // parameter leaf; repeated calls accumulate.
  void backward(NodeId root);

  // Gradient of an intermediate node from the most recent backward().
  const std::vector<double>& node_grad(NodeId id) const { return grads_.at(id); }

  // Re-executes every derived node from recorded inputs and bit-compares
  // against the stored outputs. True when identical.
  bool replay_matches() const;

 private:
  std::vector<TapeNode> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Tensor*, NodeId> param_nodes_;

  NodeId push(TapeNode node);
  Tensor compute(const TapeNode& node) const;
  void backprop_node(NodeId id);
  std::vector<double>& grad_buf(NodeId id);
};

}  // namespace polyv
