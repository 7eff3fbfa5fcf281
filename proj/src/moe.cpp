#include "polyv/moe.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <ostream>

#include "polyv/error.hpp"
#include "polyv/kernels.hpp"

namespace polyv {

void ExpertFfn::validate() const {
  if (w_gate.ndim() != 2 || w_up.ndim() != 2 || w_down.ndim() != 2) {
    throw DimensionError("expert weights must be 2-D matrices");
  }
  if (!w_gate.same_shape(w_up) || w_down.rows() != w_gate.cols() || w_down.cols() != w_gate.rows()) {
    throw DimensionError("expert dims disagree: gate " + w_gate.shape_str() + ", up " + w_up.shape_str() +
                         ", down " + w_down.shape_str());
  }
}

ExpertFfn ExpertFfn::zeros(std::size_t d_model, std::size_t d_hidden) {
  ExpertFfn e;
  e.w_gate = Tensor({d_model, d_hidden});
  e.w_up = Tensor({d_model, d_hidden});
  e.w_down = Tensor({d_hidden, d_model});
  return e;
}

ExpertFfn ExpertFfn::random(std::size_t d_model, std::size_t d_hidden, Rng& rng, double stddev) {
  ExpertFfn e;
  e.w_gate = Tensor::randn({d_model, d_hidden}, rng, stddev);
  e.w_up = Tensor::randn({d_model, d_hidden}, rng, stddev);
  e.w_down = Tensor::randn({d_hidden, d_model}, rng, stddev);
  return e;
}

void MoeLayer::validate() const {
  if (experts.empty()) throw ParameterError("MoE layer needs at least one expert");
  if (top_k < 1 || top_k > experts.size()) {
    throw ParameterError("top_k " + std::to_string(top_k) + " outside [1, " +
                         std::to_string(experts.size()) + "]");
  }
  experts[0].validate();
  for (std::size_t i = 1; i < experts.size(); ++i) {
    experts[i].validate();
    if (!experts[i].w_gate.same_shape(experts[0].w_gate)) {
      throw DimensionError("experts must share dimensions");
    }
  }
  if (router.w_router.ndim() != 2 || router.w_router.rows() != experts[0].d_model() ||
      router.w_router.cols() != experts.size()) {
    throw DimensionError("router must be d_model x M, got " + router.w_router.shape_str());
  }
}

bool LayerSchedule::is_moe(std::size_t layer) const {
  return std::binary_search(moe_layer_indices.begin(), moe_layer_indices.end(), layer);
}

std::vector<std::size_t> top_k_indices(const double* row, std::size_t m, std::size_t k) {
  std::vector<std::size_t> picked;
  picked.reserve(k);
  std::vector<bool> used(m, false);
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = m;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      if (!used[i] && row[i] > best_v) {  // strict > keeps ties on the lowest index
        best_v = row[i];
        best = i;
      }
    }
    used[best] = true;
    picked.push_back(best);
  }
  return picked;
}

RoutingRecord route(const Tensor& x, const MoeLayer& layer) {
  layer.validate();
  if (x.ndim() != 2 || x.cols() != layer.experts[0].d_model()) {
    throw DimensionError("router input must be tokens x d_model, got " + x.shape_str());
  }
  std::size_t tokens = x.rows(), m = layer.num_experts(), k = layer.top_k;
  Tensor logits({tokens, m});
  kernels::matmul_nn(tokens, x.cols(), m, x.data(), layer.router.w_router.data(), logits.data());
  RoutingRecord rec;
  rec.probs = Tensor({tokens, m});
  kernels::softmax_rows(tokens, m, logits.data(), rec.probs.data());
  rec.selected.resize(tokens);
  rec.weights = Tensor({tokens, k});
  for (std::size_t t = 0; t < tokens; ++t) {
    rec.selected[t] = top_k_indices(rec.probs.data() + t * m, m, k);
    double sum = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      rec.weights.at(t, r) = rec.probs.at(t, rec.selected[t][r]);
      sum += rec.weights.at(t, r);
    }
    if (layer.renormalize_weights) {
      for (std::size_t r = 0; r < k; ++r) rec.weights.at(t, r) /= sum;
    }
  }
  rec.eval_counts.assign(m, 0);
  return rec;
}

Tensor expert_forward(const Tensor& x, const ExpertFfn& e) {
  e.validate();
  if (x.ndim() != 2 || x.cols() != e.d_model()) {
    throw DimensionError("expert input must be tokens x d_model, got " + x.shape_str());
  }
  std::size_t tokens = x.rows(), dm = e.d_model(), dh = e.d_hidden();
  Tensor gate({tokens, dh}), up({tokens, dh});
  kernels::matmul_nn(tokens, dm, dh, x.data(), e.w_gate.data(), gate.data());
  kernels::matmul_nn(tokens, dm, dh, x.data(), e.w_up.data(), up.data());
  kernels::silu(gate.numel(), gate.data(), gate.data());
  for (std::size_t i = 0; i < gate.numel(); ++i) gate.at(i) *= up.at(i);
  Tensor y({tokens, dm});
  kernels::matmul_nn(tokens, dh, dm, gate.data(), e.w_down.data(), y.data());
  return y;
}

NodeId expert_forward_tape(Tape& tape, NodeId x, ExpertFfn& e) {
  NodeId gate = tape.silu(tape.matmul(x, tape.param(e.w_gate)));
  NodeId up = tape.matmul(x, tape.param(e.w_up));
  return tape.matmul(tape.mul(gate, up), tape.param(e.w_down));
}

std::pair<Tensor, RoutingRecord> moe_forward(const Tensor& x, const MoeLayer& layer) {
  RoutingRecord rec = route(x, layer);
  std::size_t tokens = x.rows(), dm = x.cols(), m = layer.num_experts(), k = layer.top_k;
  Tensor y({tokens, dm});
  for (std::size_t e = 0; e < m; ++e) {
    std::vector<std::size_t> toks;
    std::vector<double> wts;
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t r = 0; r < k; ++r) {
        if (rec.selected[t][r] == e) {
          toks.push_back(t);
          wts.push_back(rec.weights.at(t, r));
        }
      }
    }
    if (toks.empty()) continue;
    Tensor sub({toks.size(), dm});
    for (std::size_t s = 0; s < toks.size(); ++s) {
      std::copy_n(x.data() + toks[s] * dm, dm, sub.data() + s * dm);
    }
    Tensor out = expert_forward(sub, layer.experts[e]);
    rec.eval_counts[e] += toks.size();
    for (std::size_t s = 0; s < toks.size(); ++s) {
      for (std::size_t c = 0; c < dm; ++c) y.at(toks[s], c) += wts[s] * out.at(s, c);
    }
  }
  return {std::move(y), std::move(rec)};
}

MoeTapeResult moe_forward_tape(Tape& tape, NodeId x, MoeLayer& layer) {
  layer.validate();
  // Copy the dims up front: pushing nodes may reallocate the tape's storage
  // and invalidate references returned by value().
  const Tensor& xv = tape.value(x);
  if (xv.ndim() != 2 || xv.cols() != layer.experts[0].d_model()) {
    throw DimensionError("MoE input must be tokens x d_model, got " + xv.shape_str());
  }
  std::size_t tokens = xv.rows(), m = layer.num_experts(), k = layer.top_k;
  std::size_t d = xv.cols();

  MoeTapeResult res;
  res.probs = tape.softmax(tape.matmul(x, tape.param(layer.router.w_router)), 1);
  const Tensor& pv = tape.value(res.probs);

  res.record.probs = pv;
  res.record.selected.resize(tokens);
  res.record.eval_counts.assign(m, 0);
  for (std::size_t t = 0; t < tokens; ++t) {
    res.record.selected[t] = top_k_indices(pv.data() + t * m, m, k);
  }

  NodeId w_sel = tape.gather_cols_per_row(res.probs, res.record.selected);
  NodeId w = layer.renormalize_weights ? tape.row_normalize(w_sel) : w_sel;
  res.record.weights = tape.value(w);

  NodeId y = tape.constant(Tensor({tokens, d}));
  for (std::size_t r = 0; r < k; ++r) {
    NodeId col = tape.slice_cols(w, r, r + 1);
    for (std::size_t e = 0; e < m; ++e) {
      std::vector<std::size_t> toks;
      for (std::size_t t = 0; t < tokens; ++t) {
        if (res.record.selected[t][r] == e) toks.push_back(t);
      }
      if (toks.empty()) continue;
      NodeId sub = tape.gather_rows(x, toks);
      NodeId out = expert_forward_tape(tape, sub, layer.experts[e]);
      res.record.eval_counts[e] += toks.size();
      NodeId ws = tape.gather_rows(col, toks);
      NodeId placed = tape.scatter_rows(tape.scale_rows(out, ws), toks, tokens);
      y = tape.add(y, placed);
    }
  }
  res.y = y;
  return res;
}

std::vector<double> argmax_fractions(const Tensor& probs) {
  if (probs.ndim() != 2 || probs.rows() == 0) {
    throw ParameterError("argmax_fractions needs a non-empty tokens x M tensor");
  }
  std::size_t tokens = probs.rows(), m = probs.cols();
  std::vector<double> f(m, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (probs.at(t, i) > probs.at(t, best)) best = i;  // ties keep the lowest index
    }
    f[best] += 1.0;
  }
  for (double& v : f) v /= static_cast<double>(tokens);
  return f;
}

std::vector<double> mean_probs(const Tensor& probs) {
  if (probs.ndim() != 2 || probs.rows() == 0) {
    throw ParameterError("mean_probs needs a non-empty tokens x M tensor");
  }
  std::size_t tokens = probs.rows(), m = probs.cols();
  std::vector<double> g(m, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < m; ++i) g[i] += probs.at(t, i);
  }
  for (double& v : g) v /= static_cast<double>(tokens);
  return g;
}

double load_balance_loss(const RoutingRecord& record) {
  std::vector<double> f = argmax_fractions(record.probs);
  std::vector<double> g = mean_probs(record.probs);
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += f[i] * g[i];
  return static_cast<double>(f.size()) * acc;
}

NodeId load_balance_loss_tape(Tape& tape, NodeId probs_node) {
  // Copy what we need before pushing nodes: pushing may reallocate the tape's
  // node storage and invalidate references returned by value().
  std::vector<double> f = argmax_fractions(tape.value(probs_node));
  double m = static_cast<double>(tape.value(probs_node).cols());
  NodeId g = tape.mean_cols(probs_node);
  return tape.dot_const(g, f, m);
}

double min_topk_margin(const Tensor& probs, std::size_t k) {
  std::size_t tokens = probs.rows(), m = probs.cols();
  if (k >= m) return 1.0;  // no selection boundary to sit on
  double margin = std::numeric_limits<double>::infinity();
  std::vector<double> row(m);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < m; ++i) row[i] = probs.at(t, i);
    std::sort(row.begin(), row.end(), std::greater<double>());
    margin = std::min(margin, row[k - 1] - row[k]);
  }
  return margin;
}

MoeLayer upcycle_from_dense(const ExpertFfn& dense, std::size_t M, double noise_scale,
                            std::uint64_t seed, std::size_t top_k) {
  dense.validate();
  if (M < 1) throw ParameterError("upcycle needs at least one expert");
  if (noise_scale < 0.0) throw ParameterError("noise_scale must be nonnegative");
  MoeLayer layer;
  layer.top_k = top_k;
  layer.router.w_router = Tensor({dense.d_model(), M});
  Rng rng(substream(seed, "upcycle"));
  layer.experts.reserve(M);
  for (std::size_t e = 0; e < M; ++e) {
    ExpertFfn ex = dense;
    if (noise_scale > 0.0) {
      for (Tensor* w : {&ex.w_gate, &ex.w_up, &ex.w_down}) {
        for (std::size_t i = 0; i < w->numel(); ++i) w->at(i) += rng.normal(0.0, noise_scale);
      }
    }
    layer.experts.push_back(std::move(ex));
  }
  layer.validate();
  return layer;
}

LayerSchedule build_schedule(std::size_t total_layers, PlacementMode mode, std::size_t interval) {
  if (total_layers < 1) throw ParameterError("schedule needs at least one layer");
  LayerSchedule s;
  s.total_layers = total_layers;
  s.mode = mode;
  std::size_t half = (total_layers + 1) / 2;  // ceil(L/2)
  switch (mode) {
    case PlacementMode::kFirstHalf:
      for (std::size_t i = 0; i < half; ++i) s.moe_layer_indices.push_back(i);
      break;
    case PlacementMode::kLastHalf:
      for (std::size_t i = total_layers - half; i < total_layers; ++i) s.moe_layer_indices.push_back(i);
      break;
    case PlacementMode::kInterval:
      if (interval == 0) throw ParameterError("interval mode needs a positive stride");
      s.interval = interval;
      for (std::size_t i = 0; i < total_layers; i += interval) s.moe_layer_indices.push_back(i);
      break;
    case PlacementMode::kFull:
      for (std::size_t i = 0; i < total_layers; ++i) s.moe_layer_indices.push_back(i);
      break;
  }
  return s;
}

LayerSchedule build_schedule(std::size_t total_layers, const std::string& mode) {
  if (mode == "first_half") return build_schedule(total_layers, PlacementMode::kFirstHalf);
  if (mode == "last_half") return build_schedule(total_layers, PlacementMode::kLastHalf);
  if (mode == "full") return build_schedule(total_layers, PlacementMode::kFull);
  if (mode.rfind("interval(", 0) == 0 && mode.back() == ')') {
    std::string num = mode.substr(9, mode.size() - 10);
    if (!num.empty() && num.find_first_not_of("0123456789") == std::string::npos) {
      unsigned long n = std::stoul(num);
      if (n >= 1) return build_schedule(total_layers, PlacementMode::kInterval, n);
    }
  }
  throw ParameterError("unknown placement mode '" + mode +
                       "' (expected first_half, last_half, interval(n), full)");
}

std::string placement_mode_name(const LayerSchedule& schedule) {
  switch (schedule.mode) {
    case PlacementMode::kFirstHalf: return "first_half";
    case PlacementMode::kLastHalf: return "last_half";
    case PlacementMode::kInterval: return "interval(" + std::to_string(schedule.interval) + ")";
    case PlacementMode::kFull: return "full";
  }
  return "?";
}

void write_routing_csv(std::ostream& os, const std::vector<std::size_t>& layer_indices,
                       const std::vector<RoutingRecord>& records) {
  if (layer_indices.size() != records.size()) {
    throw ParameterError("routing CSV needs one record per layer index");
  }
  os << "layer,expert,token_fraction,mean_prob\n";
  char buf[64];
  for (std::size_t li = 0; li < records.size(); ++li) {
    std::vector<double> f = argmax_fractions(records[li].probs);
    std::vector<double> g = mean_probs(records[li].probs);
    for (std::size_t e = 0; e < f.size(); ++e) {
      os << layer_indices[li] << ',' << e << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", f[e]);
      os << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", g[e]);
      os << buf << '\n';
    }
  }
}

}  // namespace polyv
