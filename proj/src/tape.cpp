#include "polyv/tape.hpp"

#include <cmath>
#include <cstring>

#include "polyv/kernels.hpp"

namespace polyv {

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Interpret a tensor as rows x cols over the last axis (1-D becomes one row).
inline void as_rows(const Tensor& t, std::size_t& rows, std::size_t& cols) {
  if (t.ndim() == 1) {
    rows = 1;
    cols = t.extent(0);
  } else if (t.ndim() == 2) {
    rows = t.extent(0);
    cols = t.extent(1);
  } else {
    throw DimensionError("expected 1-D or 2-D tensor, got " + t.shape_str());
  }
}

std::string g_corrupt_op;  // see set_backward_corruption

}  // namespace

void set_backward_corruption(std::string op) { g_corrupt_op = std::move(op); }
const std::string& backward_corruption() { return g_corrupt_op; }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParam: return "param";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSilu: return "silu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kSum: return "sum";
    case OpKind::kMse: return "mse";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kScatterRows: return "scatter_rows";
    case OpKind::kGatherColsPerRow: return "gather_cols_per_row";
    case OpKind::kRowNormalize: return "row_normalize";
    case OpKind::kScaleRows: return "scale_rows";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kMeanCols: return "mean_cols";
    case OpKind::kDotConst: return "dot_const";
  }
  return "unknown";
}

NodeId Tape::push(TapeNode node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Tape::constant(Tensor v) {
  TapeNode n;
  n.kind = OpKind::kConstant;
  n.value = std::move(v);
  return push(std::move(n));
}

NodeId Tape::param(Tensor& storage) {
  auto it = param_nodes_.find(&storage);
  if (it != param_nodes_.end()) return it->second;
  TapeNode n;
  n.kind = OpKind::kParam;
  n.value = storage;  // snapshot of current values
  n.bound = &storage;
  NodeId id = push(std::move(n));
  param_nodes_.emplace(&storage, id);
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows()) {
    throw DimensionError("matmul shape mismatch: " + ta.shape_str() + " x " + tb.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.cols()) {
    throw DimensionError("matmul_nt shape mismatch: " + ta.shape_str() + " x " + tb.shape_str() + "^T");
  }
  TapeNode n;
  n.kind = OpKind::kMatMulNT;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  if (!value(a).same_shape(value(b))) {
    throw DimensionError("add shape mismatch: " + value(a).shape_str() + " vs " + value(b).shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  if (!value(a).same_shape(value(b))) {
    throw DimensionError("sub shape mismatch: " + value(a).shape_str() + " vs " + value(b).shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kSub;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  if (!value(a).same_shape(value(b))) {
    throw DimensionError("mul shape mismatch: " + value(a).shape_str() + " vs " + value(b).shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
  TapeNode n;
  n.kind = OpKind::kScale;
  n.inputs = {a};
  n.scalar = factor;
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::silu(NodeId x) {
  TapeNode n;
  n.kind = OpKind::kSilu;
  n.inputs = {x};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId x, std::size_t axis) {
  const Tensor& t = value(x);
  if (axis >= std::max<std::size_t>(t.ndim(), 1)) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + t.shape_str());
  }
  if (t.ndim() > 2) throw DimensionError("softmax supports 1-D and 2-D tensors, got " + t.shape_str());
  TapeNode n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {x};
  n.axis = axis;
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  std::size_t rows, cols;
  as_rows(value(x), rows, cols);
  if (value(gain).numel() != cols || value(bias).numel() != cols) {
    throw DimensionError("layer_norm gain/bias must match last axis " + std::to_string(cols));
  }
  if (eps <= 0.0) throw ParameterError("layer_norm eps must be positive");
  TapeNode n;
  n.kind = OpKind::kLayerNorm;
  n.inputs = {x, gain, bias};
  n.scalar = eps;
  n.saved = Tensor({rows, cols});
  n.saved2 = Tensor({rows});
  n.value = Tensor(value(x).shape());
  kernels::layer_norm_rows(rows, cols, value(x).data(), value(gain).data(), value(bias).data(), eps,
                           n.value.data(), n.saved.data(), n.saved2.data());
  return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
  TapeNode n;
  n.kind = OpKind::kSum;
  n.inputs = {x};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::mse(NodeId a, NodeId b) {
  if (!value(a).same_shape(value(b))) {
    throw DimensionError("mse shape mismatch: " + value(a).shape_str() + " vs " + value(b).shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kMse;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::vector<int> targets) {
  const Tensor& t = value(logits);
  if (t.ndim() != 2) throw DimensionError("cross_entropy expects 2-D logits, got " + t.shape_str());
  if (t.rows() != targets.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(t.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  for (int id : targets) {
    if (id < 0 || static_cast<std::size_t>(id) >= t.cols()) {
      throw ParameterError("cross_entropy target " + std::to_string(id) + " out of vocabulary range [0, " +
                           std::to_string(t.cols()) + ")");
    }
  }
  if (targets.empty()) throw ParameterError("cross_entropy needs at least one target");
  TapeNode n;
  n.kind = OpKind::kCrossEntropy;
  n.inputs = {logits};
  n.targets = std::move(targets);
  // Save row softmax for backward.
  n.saved = Tensor({t.rows(), t.cols()});
  kernels::softmax_rows(t.rows(), t.cols(), t.data(), n.saved.data());
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId x, std::vector<std::size_t> rows) {
  const Tensor& t = value(x);
  if (t.ndim() != 2) throw DimensionError("gather_rows expects 2-D tensor, got " + t.shape_str());
  for (std::size_t r : rows) {
    if (r >= t.rows()) throw DimensionError("gather_rows index " + std::to_string(r) + " out of range");
  }
  TapeNode n;
  n.kind = OpKind::kGatherRows;
  n.inputs = {x};
  n.row_index = std::move(rows);
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::scatter_rows(NodeId x, std::vector<std::size_t> rows, std::size_t total_rows) {
  const Tensor& t = value(x);
  if (t.ndim() != 2) throw DimensionError("scatter_rows expects 2-D tensor, got " + t.shape_str());
  if (rows.size() != t.rows()) throw DimensionError("scatter_rows index count mismatch");
  for (std::size_t r : rows) {
    if (r >= total_rows) throw DimensionError("scatter_rows index " + std::to_string(r) + " out of range");
  }
  TapeNode n;
  n.kind = OpKind::kScatterRows;
  n.inputs = {x};
  n.row_index = std::move(rows);
  n.hi = total_rows;
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::gather_cols_per_row(NodeId x, std::vector<std::vector<std::size_t>> cols) {
  const Tensor& t = value(x);
  if (t.ndim() != 2) throw DimensionError("gather_cols_per_row expects 2-D tensor, got " + t.shape_str());
  if (cols.size() != t.rows()) throw DimensionError("gather_cols_per_row needs one column list per row");
  std::size_t k = cols.empty() ? 0 : cols[0].size();
  for (const auto& list : cols) {
    if (list.size() != k) throw DimensionError("gather_cols_per_row ragged column lists");
    for (std::size_t c : list) {
      if (c >= t.cols()) throw DimensionError("gather_cols_per_row column out of range");
    }
  }
  TapeNode n;
  n.kind = OpKind::kGatherColsPerRow;
  n.inputs = {x};
  n.col_index = std::move(cols);
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::row_normalize(NodeId x) {
  TapeNode n;
  n.kind = OpKind::kRowNormalize;
  n.inputs = {x};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::scale_rows(NodeId x, NodeId w) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  if (tx.ndim() != 2) throw DimensionError("scale_rows expects 2-D input, got " + tx.shape_str());
  if (tw.numel() != tx.rows()) {
    throw DimensionError("scale_rows weight count " + std::to_string(tw.numel()) + " vs rows " +
                         std::to_string(tx.rows()));
  }
  TapeNode n;
  n.kind = OpKind::kScaleRows;
  n.inputs = {x, w};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::slice_rows(NodeId x, std::size_t lo, std::size_t hi) {
  const Tensor& t = value(x);
  if (t.ndim() != 2 || lo > hi || hi > t.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(lo) + ", " + std::to_string(hi) + ") invalid for " +
                         t.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kSliceRows;
  n.inputs = {x};
  n.lo = lo;
  n.hi = hi;
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId x, std::size_t lo, std::size_t hi) {
  const Tensor& t = value(x);
  if (t.ndim() != 2 || lo > hi || hi > t.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(lo) + ", " + std::to_string(hi) + ") invalid for " +
                         t.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kSliceCols;
  n.inputs = {x};
  n.lo = lo;
  n.hi = hi;
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::concat_rows(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.cols()) {
    throw DimensionError("concat_rows shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kConcatRows;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.ndim() != 2 || tb.ndim() != 2 || ta.rows() != tb.rows()) {
    throw DimensionError("concat_cols shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kConcatCols;
  n.inputs = {a, b};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::mean_cols(NodeId x) {
  const Tensor& t = value(x);
  if (t.ndim() != 2 || t.rows() == 0) {
    throw DimensionError("mean_cols expects non-empty 2-D tensor, got " + t.shape_str());
  }
  TapeNode n;
  n.kind = OpKind::kMeanCols;
  n.inputs = {x};
  n.value = compute(n);
  return push(std::move(n));
}

NodeId Tape::dot_const(NodeId x, std::vector<double> coeffs, double scale) {
  const Tensor& t = value(x);
  if (t.numel() != coeffs.size()) {
    throw DimensionError("dot_const coefficient count " + std::to_string(coeffs.size()) + " vs " +
                         std::to_string(t.numel()) + " elements");
  }
  TapeNode n;
  n.kind = OpKind::kDotConst;
  n.inputs = {x};
  n.coeffs = std::move(coeffs);
  n.scalar = scale;
  n.value = compute(n);
  return push(std::move(n));
}

Tensor Tape::compute(const TapeNode& n) const {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
  switch (n.kind) {
    case OpKind::kConstant:
    case OpKind::kParam:
      return n.value;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor out({a.rows(), b.cols()});
      kernels::matmul_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), out.data());
      return out;
    }
    case OpKind::kMatMulNT: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor out({a.rows(), b.rows()});
      kernels::matmul_nt(a.rows(), a.cols(), b.rows(), a.data(), b.data(), out.data());
      return out;
    }
    case OpKind::kAdd: {
      Tensor out(in(0).shape());
      for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = in(0).at(i) + in(1).at(i);
      return out;
    }
    case OpKind::kSub: {
      Tensor out(in(0).shape());
      for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = in(0).at(i) - in(1).at(i);
      return out;
    }
    case OpKind::kMul: {
      Tensor out(in(0).shape());
      for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = in(0).at(i) * in(1).at(i);
      return out;
    }
    case OpKind::kScale: {
      Tensor out(in(0).shape());
      for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = n.scalar * in(0).at(i);
      return out;
    }
    case OpKind::kSilu: {
      Tensor out(in(0).shape());
      kernels::silu(out.numel(), in(0).data(), out.data());
      return out;
    }
    case OpKind::kSoftmax: {
      const Tensor& x = in(0);
      Tensor out(x.shape());
      if (x.ndim() == 1 || (x.ndim() == 2 && n.axis == 1)) {
        std::size_t rows, cols;
        as_rows(x, rows, cols);
        kernels::softmax_rows(rows, cols, x.data(), out.data());
      } else {
        // axis 0 of a 2-D tensor: softmax down each column.
        std::size_t rows = x.rows(), cols = x.cols();
        std::vector<double> col(rows), res(rows);
        for (std::size_t c = 0; c < cols; ++c) {
          for (std::size_t r = 0; r < rows; ++r) col[r] = x.at(r, c);
          kernels::serial::softmax_rows(1, rows, col.data(), res.data());
          for (std::size_t r = 0; r < rows; ++r) out.at(r, c) = res[r];
        }
      }
      return out;
    }
    case OpKind::kLayerNorm: {
      const Tensor& x = in(0);
      std::size_t rows, cols;
      as_rows(x, rows, cols);
      Tensor out(x.shape());
      kernels::layer_norm_rows(rows, cols, x.data(), in(1).data(), in(2).data(), n.scalar, out.data(),
                               nullptr, nullptr);
      return out;
    }
    case OpKind::kSum: {
      double acc = 0.0;
      for (std::size_t i = 0; i < in(0).numel(); ++i) acc += in(0).at(i);
      return Tensor::scalar(acc);
    }
    case OpKind::kMse: {
      double acc = 0.0;
      for (std::size_t i = 0; i < in(0).numel(); ++i) {
        double d = in(0).at(i) - in(1).at(i);
        acc += d * d;
      }
      return Tensor::scalar(acc);
    }
    case OpKind::kCrossEntropy: {
      const Tensor& logits = in(0);
      std::size_t rows = logits.rows(), cols = logits.cols();
      Tensor probs({rows, cols});
      kernels::softmax_rows(rows, cols, logits.data(), probs.data());
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        acc -= std::log(probs.at(r, static_cast<std::size_t>(n.targets[r])));
      }
      return Tensor::scalar(acc / static_cast<double>(rows));
    }
    case OpKind::kGatherRows: {
      const Tensor& x = in(0);
      Tensor out({n.row_index.size(), x.cols()});
      for (std::size_t r = 0; r < n.row_index.size(); ++r) {
        std::memcpy(out.data() + r * x.cols(), x.data() + n.row_index[r] * x.cols(), x.cols() * sizeof(double));
      }
      return out;
    }
    case OpKind::kScatterRows: {
      const Tensor& x = in(0);
      Tensor out({n.hi, x.cols()});
      for (std::size_t r = 0; r < n.row_index.size(); ++r) {
        std::memcpy(out.data() + n.row_index[r] * x.cols(), x.data() + r * x.cols(), x.cols() * sizeof(double));
      }
      return out;
    }
    case OpKind::kGatherColsPerRow: {
      const Tensor& x = in(0);
      std::size_t k = n.col_index.empty() ? 0 : n.col_index[0].size();
      Tensor out({x.rows(), k});
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t p = 0; p < k; ++p) out.at(r, p) = x.at(r, n.col_index[r][p]);
      }
      return out;
    }
    case OpKind::kRowNormalize: {
      const Tensor& x = in(0);
      std::size_t rows, cols;
      as_rows(x, rows, cols);
      Tensor out(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x.data()[r * cols + c];
        double inv = 1.0 / s;
        for (std::size_t c = 0; c < cols; ++c) out.data()[r * cols + c] = x.data()[r * cols + c] * inv;
      }
      return out;
    }
    case OpKind::kScaleRows: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      Tensor out(x.shape());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double f = w.at(r);
        for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = f * x.at(r, c);
      }
      return out;
    }
    case OpKind::kSliceRows: {
      const Tensor& x = in(0);
      Tensor out({n.hi - n.lo, x.cols()});
      std::memcpy(out.data(), x.data() + n.lo * x.cols(), (n.hi - n.lo) * x.cols() * sizeof(double));
      return out;
    }
    case OpKind::kSliceCols: {
      const Tensor& x = in(0);
      Tensor out({x.rows(), n.hi - n.lo});
      for (std::size_t r = 0; r < x.rows(); ++r) {
        std::memcpy(out.data() + r * (n.hi - n.lo), x.data() + r * x.cols() + n.lo,
                    (n.hi - n.lo) * sizeof(double));
      }
      return out;
    }
    case OpKind::kConcatRows: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor out({a.rows() + b.rows(), a.cols()});
      std::memcpy(out.data(), a.data(), a.numel() * sizeof(double));
      std::memcpy(out.data() + a.numel(), b.data(), b.numel() * sizeof(double));
      return out;
    }
    case OpKind::kConcatCols: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::size_t cols = a.cols() + b.cols();
      Tensor out({a.rows(), cols});
      for (std::size_t r = 0; r < a.rows(); ++r) {
        std::memcpy(out.data() + r * cols, a.data() + r * a.cols(), a.cols() * sizeof(double));
        std::memcpy(out.data() + r * cols + a.cols(), b.data() + r * b.cols(), b.cols() * sizeof(double));
      }
      return out;
    }
    case OpKind::kMeanCols: {
      const Tensor& x = in(0);
      Tensor out({x.cols()});
      double inv = 1.0 / static_cast<double>(x.rows());
      for (std::size_t c = 0; c < x.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) acc += x.at(r, c);
        out.at(c) = acc * inv;
      }
      return out;
    }
    case OpKind::kDotConst: {
      double acc = 0.0;
      for (std::size_t i = 0; i < in(0).numel(); ++i) acc += n.coeffs[i] * in(0).at(i);
      return Tensor::scalar(n.scalar * acc);
    }
  }
  throw InternalError("unhandled op in compute");
}

std::vector<double>& Tape::grad_buf(NodeId id) {
  if (grads_[id].empty() && nodes_[id].value.numel() > 0) {
    grads_[id].assign(nodes_[id].value.numel(), 0.0);
  } else if (grads_[id].empty()) {
    grads_[id] = {};
  }
  return grads_[id];
}

void Tape::backward(NodeId root) {
  if (root >= nodes_.size()) throw InternalError("backward root out of range");
  if (nodes_[root].value.numel() != 1) {
    throw ParameterError("backward requires a scalar root, got " + nodes_[root].value.shape_str());
  }
  grads_.assign(nodes_.size(), {});
  grad_buf(root).assign(1, 1.0);
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!grads_[i].empty()) backprop_node(i);
  }
  // Accumulate into bound parameter storage.
  for (std::size_t i = 0; i <= root; ++i) {
    if (nodes_[i].kind == OpKind::kParam && !grads_[i].empty()) {
      auto& g = nodes_[i].bound->grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += grads_[i][j];
    }
  }
}

void Tape::backprop_node(NodeId id) {
  const TapeNode& n = nodes_[id];
  if (!g_corrupt_op.empty() && g_corrupt_op == op_name(n.kind)) {
    for (double& v : grads_[id]) v *= 1.01;
  }
  const std::vector<double>& g = grads_[id];
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
  auto gin = [&](std::size_t i) -> std::vector<double>& { return grad_buf(n.inputs[i]); };

  switch (n.kind) {
    case OpKind::kConstant:
    case OpKind::kParam:
      return;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::size_t m = a.rows(), k = a.cols(), nn = b.cols();
      std::vector<double> ga(m * k), gb(k * nn);
      kernels::matmul_nt(m, nn, k, g.data(), b.data(), ga.data());   // g * b^T
      kernels::matmul_tn(m, k, nn, a.data(), g.data(), gb.data());   // a^T * g
      auto& da = gin(0);
      for (std::size_t i = 0; i < ga.size(); ++i) da[i] += ga[i];
      auto& db = gin(1);
      for (std::size_t i = 0; i < gb.size(); ++i) db[i] += gb[i];
      return;
    }
    case OpKind::kMatMulNT: {
      // c = a * b^T with a[m x k], b[nn x k]; da = g * b, db = g^T * a.
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::size_t m = a.rows(), k = a.cols(), nn = b.rows();
      std::vector<double> ga(m * k), gb(nn * k);
      kernels::matmul_nn(m, nn, k, g.data(), b.data(), ga.data());
      kernels::matmul_tn(m, nn, k, g.data(), a.data(), gb.data());
      auto& da = gin(0);
      for (std::size_t i = 0; i < ga.size(); ++i) da[i] += ga[i];
      auto& db = gin(1);
      for (std::size_t i = 0; i < gb.size(); ++i) db[i] += gb[i];
      return;
    }
    case OpKind::kAdd: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      auto& db = gin(1);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      return;
    }
    case OpKind::kSub: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      auto& db = gin(1);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      return;
    }
    case OpKind::kMul: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * in(1).at(i);
      auto& db = gin(1);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * in(0).at(i);
      return;
    }
    case OpKind::kScale: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += n.scalar * g[i];
      return;
    }
    case OpKind::kSilu: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = in(0).at(i);
        double s = sigmoid(x);
        da[i] += g[i] * s * (1.0 + x * (1.0 - s));
      }
      return;
    }
    case OpKind::kSoftmax: {
      const Tensor& p = n.value;
      auto& da = gin(0);
      if (in(0).ndim() == 1 || n.axis == 1) {
        std::size_t rows, cols;
        as_rows(p, rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p.at(r * cols + c);
          for (std::size_t c = 0; c < cols; ++c) {
            da[r * cols + c] += p.at(r * cols + c) * (g[r * cols + c] - dot);
          }
        }
      } else {
        std::size_t rows = p.rows(), cols = p.cols();
        for (std::size_t c = 0; c < cols; ++c) {
          double dot = 0.0;
          for (std::size_t r = 0; r < rows; ++r) dot += g[r * cols + c] * p.at(r, c);
          for (std::size_t r = 0; r < rows; ++r) da[r * cols + c] += p.at(r, c) * (g[r * cols + c] - dot);
        }
      }
      return;
    }
    case OpKind::kLayerNorm: {
      std::size_t rows, cols;
      as_rows(in(0), rows, cols);
      const Tensor& gain = in(1);
      const Tensor& normed = n.saved;
      const Tensor& rstd = n.saved2;
      auto& dx = gin(0);
      auto& dgain = gin(1);
      auto& dbias = gin(2);
      double inv_cols = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_a = 0.0, mean_ax = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          double a = g[r * cols + c] * gain.at(c);
          mean_a += a;
          mean_ax += a * normed.at(r * cols + c);
        }
        mean_a *= inv_cols;
        mean_ax *= inv_cols;
        for (std::size_t c = 0; c < cols; ++c) {
          double a = g[r * cols + c] * gain.at(c);
          dx[r * cols + c] += rstd.at(r) * (a - mean_a - normed.at(r * cols + c) * mean_ax);
          dgain[c] += g[r * cols + c] * normed.at(r * cols + c);
          dbias[c] += g[r * cols + c];
        }
      }
      return;
    }
    case OpKind::kSum: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
      return;
    }
    case OpKind::kMse: {
      auto& da = gin(0);
      auto& db = gin(1);
      for (std::size_t i = 0; i < da.size(); ++i) {
        double d = 2.0 * (in(0).at(i) - in(1).at(i)) * g[0];
        da[i] += d;
        db[i] -= d;
      }
      return;
    }
    case OpKind::kCrossEntropy: {
      const Tensor& probs = n.saved;
      std::size_t rows = probs.rows(), cols = probs.cols();
      double inv_rows = 1.0 / static_cast<double>(rows);
      auto& da = gin(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          double onehot = (static_cast<std::size_t>(n.targets[r]) == c) ? 1.0 : 0.0;
          da[r * cols + c] += g[0] * (probs.at(r, c) - onehot) * inv_rows;
        }
      }
      return;
    }
    case OpKind::kGatherRows: {
      std::size_t cols = in(0).cols();
      auto& da = gin(0);
      for (std::size_t r = 0; r < n.row_index.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) da[n.row_index[r] * cols + c] += g[r * cols + c];
      }
      return;
    }
    case OpKind::kScatterRows: {
      std::size_t cols = in(0).cols();
      auto& da = gin(0);
      for (std::size_t r = 0; r < n.row_index.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) da[r * cols + c] += g[n.row_index[r] * cols + c];
      }
      return;
    }
    case OpKind::kGatherColsPerRow: {
      std::size_t cols = in(0).cols();
      std::size_t k = n.col_index.empty() ? 0 : n.col_index[0].size();
      auto& da = gin(0);
      for (std::size_t r = 0; r < n.col_index.size(); ++r) {
        for (std::size_t p = 0; p < k; ++p) da[r * cols + n.col_index[r][p]] += g[r * k + p];
      }
      return;
    }
    case OpKind::kRowNormalize: {
      const Tensor& x = in(0);
      const Tensor& y = n.value;
      std::size_t rows, cols;
      as_rows(x, rows, cols);
      auto& da = gin(0);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0, dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          s += x.at(r * cols + c);
          dot += g[r * cols + c] * y.at(r * cols + c);
        }
        double inv = 1.0 / s;
        for (std::size_t c = 0; c < cols; ++c) da[r * cols + c] += (g[r * cols + c] - dot) * inv;
      }
      return;
    }
    case OpKind::kScaleRows: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      auto& dx = gin(0);
      auto& dw = gin(1);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          dx[r * x.cols() + c] += g[r * x.cols() + c] * w.at(r);
          acc += g[r * x.cols() + c] * x.at(r, c);
        }
        dw[r] += acc;
      }
      return;
    }
    case OpKind::kSliceRows: {
      std::size_t cols = in(0).cols();
      auto& da = gin(0);
      for (std::size_t r = n.lo; r < n.hi; ++r) {
        for (std::size_t c = 0; c < cols; ++c) da[r * cols + c] += g[(r - n.lo) * cols + c];
      }
      return;
    }
    case OpKind::kSliceCols: {
      std::size_t cols = in(0).cols();
      std::size_t w = n.hi - n.lo;
      auto& da = gin(0);
      for (std::size_t r = 0; r < in(0).rows(); ++r) {
        for (std::size_t c = 0; c < w; ++c) da[r * cols + n.lo + c] += g[r * w + c];
      }
      return;
    }
    case OpKind::kConcatRows: {
      auto& da = gin(0);
      auto& db = gin(1);
      std::size_t na = in(0).numel();
      for (std::size_t i = 0; i < na; ++i) da[i] += g[i];
      for (std::size_t i = 0; i < in(1).numel(); ++i) db[i] += g[na + i];
      return;
    }
    case OpKind::kConcatCols: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::size_t cols = a.cols() + b.cols();
      auto& da = gin(0);
      auto& db = gin(1);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) da[r * a.cols() + c] += g[r * cols + c];
        for (std::size_t c = 0; c < b.cols(); ++c) db[r * b.cols() + c] += g[r * cols + a.cols() + c];
      }
      return;
    }
    case OpKind::kMeanCols: {
      const Tensor& x = in(0);
      double inv = 1.0 / static_cast<double>(x.rows());
      auto& da = gin(0);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) da[r * x.cols() + c] += g[c] * inv;
      }
      return;
    }
    case OpKind::kDotConst: {
      auto& da = gin(0);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0] * n.scalar * n.coeffs[i];
      return;
    }
  }
  throw InternalError("unhandled op in backward");
}

bool Tape::replay_matches() const {
  for (const TapeNode& n : nodes_) {
    if (n.kind == OpKind::kConstant || n.kind == OpKind::kParam) continue;
    Tensor redo = compute(n);
    if (redo.numel() != n.value.numel()) return false;
    if (redo.numel() > 0 &&
        std::memcmp(redo.data(), n.value.data(), redo.numel() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace polyv
