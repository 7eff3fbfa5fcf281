#include "polyv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "polyv/error.hpp"
#include "polyv/grad_check.hpp"
#include "polyv/model.hpp"

namespace polyv {

namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct SuiteContext {
  std::uint64_t seed;
  double eps;
  std::size_t max_coords;
  std::vector<GradPathResult>* out;
};

void run_path(SuiteContext& ctx, const std::string& path, double tol, const Objective& f,
              const std::vector<ParamRef>& params, bool subsample = false) {
  GradCheckOptions opts;
  opts.eps = ctx.eps;
  if (subsample) {
    opts.max_coords_per_param = ctx.max_coords;
    opts.subsample_seed = substream(ctx.seed, "grad-subsample:" + path);
  }
  GradCheckResult r = grad_check(f, params, opts);
  ctx.out->push_back(
      {path, tol, r.max_rel_err, r.coords_checked, r.max_rel_err <= tol, r.worst_param});
}

// ---- primitive paths: each op composed with a quadratic readout ----

void add_op_paths(SuiteContext& ctx) {
  const double kTol = 1e-6;
  auto rng_for = [&ctx](const std::string& path) { return Rng(substream(ctx.seed, "grad:" + path)); };

  {
    Rng rng = rng_for("op:matmul");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), b = Tensor::randn({4, 2}, rng, 1.0);
    Tensor c0 = Tensor::randn({3, 2}, rng, 1.0);
    run_path(ctx, "op:matmul", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.matmul(t.param(a), t.param(b)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:matmul_nt");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), b = Tensor::randn({2, 4}, rng, 1.0);
    Tensor c0 = Tensor::randn({3, 2}, rng, 1.0);
    run_path(ctx, "op:matmul_nt", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.matmul_nt(t.param(a), t.param(b)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  for (const char* name : {"op:add", "op:sub", "op:mul"}) {
    Rng rng = rng_for(name);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), b = Tensor::randn({3, 4}, rng, 1.0);
    Tensor c0 = Tensor::randn({3, 4}, rng, 1.0);
    std::string op = std::string(name).substr(3);
    run_path(ctx, name, kTol,
             [&, op](bool back) {
               Tape t;
               NodeId x = op == "add"   ? t.add(t.param(a), t.param(b))
                          : op == "sub" ? t.sub(t.param(a), t.param(b))
                                        : t.mul(t.param(a), t.param(b));
               NodeId loss = t.mse(x, t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:scale");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), c0 = Tensor::randn({3, 4}, rng, 1.0);
    run_path(ctx, "op:scale", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.scale(t.param(a), 1.7), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:silu");
    Tensor a = Tensor::randn({3, 4}, rng, 1.5), c0 = Tensor::randn({3, 4}, rng, 1.0);
    run_path(ctx, "op:silu", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.silu(t.param(a)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  for (std::size_t axis : {std::size_t{1}, std::size_t{0}}) {
    std::string name = axis == 1 ? "op:softmax" : "op:softmax_cols";
    Rng rng = rng_for(name);
    Tensor a = Tensor::randn({4, 5}, rng, 1.2), c0 = Tensor::randn({4, 5}, rng, 0.5);
    run_path(ctx, name, kTol,
             [&, axis](bool back) {
               Tape t;
               NodeId loss = t.mse(t.softmax(t.param(a), axis), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:layer_norm");
    Tensor x = Tensor::randn({4, 6}, rng, 1.0);
    Tensor gain = uniform_tensor({6}, rng, 0.8, 1.2);
    Tensor bias = Tensor::randn({6}, rng, 0.1);
    Tensor c0 = Tensor::randn({4, 6}, rng, 0.5);
    run_path(ctx, "op:layer_norm", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss =
                   t.mse(t.layer_norm(t.param(x), t.param(gain), t.param(bias), 1e-5), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"x", &x}, {"gain", &gain}, {"bias", &bias}});
  }
  {
    Rng rng = rng_for("op:sum");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), b = Tensor::randn({3, 4}, rng, 1.0);
    run_path(ctx, "op:sum", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.sum(t.mul(t.param(a), t.param(b)));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:mse");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), b = Tensor::randn({3, 4}, rng, 1.0);
    run_path(ctx, "op:mse", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.param(a), t.param(b));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:cross_entropy");
    Tensor logits = Tensor::randn({4, 7}, rng, 1.5);
    std::vector<int> targets = {1, 0, 6, 3};
    run_path(ctx, "op:cross_entropy", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.cross_entropy(t.param(logits), targets);
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"logits", &logits}});
  }
  {
    Rng rng = rng_for("op:gather_rows");
    Tensor a = Tensor::randn({4, 3}, rng, 1.0), c0 = Tensor::randn({5, 3}, rng, 1.0);
    std::vector<std::size_t> rows = {2, 0, 1, 0, 3};  // duplicate row exercises accumulation
    run_path(ctx, "op:gather_rows", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.gather_rows(t.param(a), rows), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:scatter_rows");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0), c0 = Tensor::randn({6, 4}, rng, 1.0);
    std::vector<std::size_t> rows = {4, 1, 0};
    run_path(ctx, "op:scatter_rows", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.scatter_rows(t.param(a), rows, 6), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:gather_cols_per_row");
    Tensor a = Tensor::randn({4, 5}, rng, 1.0), c0 = Tensor::randn({4, 2}, rng, 1.0);
    std::vector<std::vector<std::size_t>> cols = {{1, 3}, {0, 2}, {4, 1}, {2, 2}};
    run_path(ctx, "op:gather_cols_per_row", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.gather_cols_per_row(t.param(a), cols), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:row_normalize");
    Tensor a = uniform_tensor({4, 3}, rng, 0.5, 1.5);
    Tensor c0 = Tensor::randn({4, 3}, rng, 0.3);
    run_path(ctx, "op:row_normalize", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.row_normalize(t.param(a)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:scale_rows");
    Tensor x = Tensor::randn({4, 3}, rng, 1.0);
    Tensor w = uniform_tensor({4, 1}, rng, 0.5, 1.5);
    Tensor c0 = Tensor::randn({4, 3}, rng, 1.0);
    run_path(ctx, "op:scale_rows", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.scale_rows(t.param(x), t.param(w)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"x", &x}, {"w", &w}});
  }
  {
    Rng rng = rng_for("op:slice_rows");
    Tensor a = Tensor::randn({5, 3}, rng, 1.0), c0 = Tensor::randn({3, 3}, rng, 1.0);
    run_path(ctx, "op:slice_rows", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.slice_rows(t.param(a), 1, 4), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:slice_cols");
    Tensor a = Tensor::randn({3, 6}, rng, 1.0), c0 = Tensor::randn({3, 3}, rng, 1.0);
    run_path(ctx, "op:slice_cols", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.slice_cols(t.param(a), 2, 5), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:concat_rows");
    Tensor a = Tensor::randn({2, 3}, rng, 1.0), b = Tensor::randn({3, 3}, rng, 1.0);
    Tensor c0 = Tensor::randn({5, 3}, rng, 1.0);
    run_path(ctx, "op:concat_rows", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.concat_rows(t.param(a), t.param(b)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:concat_cols");
    Tensor a = Tensor::randn({3, 2}, rng, 1.0), b = Tensor::randn({3, 4}, rng, 1.0);
    Tensor c0 = Tensor::randn({3, 6}, rng, 1.0);
    run_path(ctx, "op:concat_cols", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.mse(t.concat_cols(t.param(a), t.param(b)), t.constant(c0));
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}, {"b", &b}});
  }
  {
    Rng rng = rng_for("op:mean_cols");
    Tensor a = Tensor::randn({4, 3}, rng, 1.0);
    std::vector<double> coeffs = {0.3, -1.1, 0.7};
    run_path(ctx, "op:mean_cols", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.dot_const(t.mean_cols(t.mul(t.param(a), t.param(a))), coeffs, 1.3);
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
  {
    Rng rng = rng_for("op:dot_const");
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    std::vector<double> coeffs(12);
    for (double& c : coeffs) c = rng.uniform(-1.0, 1.0);
    run_path(ctx, "op:dot_const", kTol,
             [&](bool back) {
               Tape t;
               NodeId loss = t.dot_const(t.mul(t.param(a), t.param(a)), coeffs, 2.5);
               double v = t.value(loss).item();
               if (back) t.backward(loss);
               return v;
             },
             {{"a", &a}});
  }
}

void add_expert_path(SuiteContext& ctx) {
  Rng rng(substream(ctx.seed, "grad:expert_ffn"));
  ExpertFfn e = ExpertFfn::random(6, 10, rng, 0.4);
  Tensor x = Tensor::randn({5, 6}, rng, 1.0);
  Tensor c0 = Tensor::randn({5, 6}, rng, 0.5);
  run_path(ctx, "expert_ffn", 1e-6,
           [&](bool back) {
             Tape t;
             NodeId loss = t.mse(expert_forward_tape(t, t.param(x), e), t.constant(c0));
             double v = t.value(loss).item();
             if (back) t.backward(loss);
             return v;
           },
           {{"x", &x}, {"w_gate", &e.w_gate}, {"w_up", &e.w_up}, {"w_down", &e.w_down}});
}

void add_alignment_path(SuiteContext& ctx) {
  Rng rng(substream(ctx.seed, "grad:alignment_projector"));
  AlignmentProjector proj;
  proj.temporal = TwoLayerMlp::random(6, 8, 5, rng, 0.4);
  proj.spatial = TwoLayerMlp::random(6, 8, 4, rng, 0.4);
  Tensor slice = Tensor::randn({3, 6}, rng, 1.0);
  TeacherFeatures teachers{Tensor::randn({3, 5}, rng, 0.5), Tensor::randn({3, 4}, rng, 0.5)};
  run_path(ctx, "alignment_projector", 1e-6,
           [&](bool back) {
             Tape t;
             auto [fv, fg] = project_synergy_tape(t, t.param(slice), proj);
             NodeId loss = coarse_loss_tape(t, fv, fg, teachers);
             double v = t.value(loss).item();
             if (back) t.backward(loss);
             return v;
           },
           {{"slice", &slice},
            {"t.w1", &proj.temporal.w1},
            {"t.w2", &proj.temporal.w2},
            {"g.w1", &proj.spatial.w1},
            {"g.w2", &proj.spatial.w2}});
}

void add_moe_path(SuiteContext& ctx) {
  // Finite differences step across routing boundaries when two experts tie;
  // reseed until the top-k margin dwarfs the step size.
  MoeLayer layer;
  Tensor x;
  bool placed = false;
  for (std::size_t attempt = 0; attempt < 64 && !placed; ++attempt) {
    Rng rng(substream(ctx.seed, "grad:moe_layer:retry:" + std::to_string(attempt)));
    layer = MoeLayer{};
    layer.router.w_router = Tensor::randn({6, 4}, rng, 0.8);
    layer.top_k = 2;
    for (int e = 0; e < 4; ++e) layer.experts.push_back(ExpertFfn::random(6, 10, rng, 0.4));
    x = Tensor::randn({8, 6}, rng, 1.0);
    RoutingRecord rec = route(x, layer);
    placed = min_topk_margin(rec.probs, layer.top_k) > 1e-3;
  }
  if (!placed) throw OracleError("could not seed a tie-free routing fixture");
  Rng crng(substream(ctx.seed, "grad:moe_layer:target"));
  Tensor c0 = Tensor::randn({8, 6}, crng, 0.5);
  std::vector<ParamRef> params = {{"x", &x}, {"router", &layer.router.w_router}};
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    std::string base = "expert" + std::to_string(e);
    params.push_back({base + ".w_gate", &layer.experts[e].w_gate});
    params.push_back({base + ".w_up", &layer.experts[e].w_up});
    params.push_back({base + ".w_down", &layer.experts[e].w_down});
  }
  run_path(ctx, "moe_layer", 1e-4,
           [&](bool back) {
             Tape t;
             MoeTapeResult r = moe_forward_tape(t, t.param(x), layer);
             NodeId loss = t.add(t.mse(r.y, t.constant(c0)),
                                 t.scale(load_balance_loss_tape(t, r.probs), 0.7));
             double v = t.value(loss).item();
             if (back) t.backward(loss);
             return v;
           },
           params, /*subsample=*/true);
}

void add_end_to_end_path(SuiteContext& ctx) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 8;
  cfg.d_hidden = 12;
  cfg.d_vis = 5;
  cfg.vocab = 11;
  cfg.heads = 2;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.placement = "full";
  cfg.synergy_tokens = 2;
  cfg.d_align_t = 6;
  cfg.d_align_g = 5;
  cfg.d_align_hidden = 7;
  cfg.init_std = 0.3;

  ToyModel model;
  Tensor visual;
  std::vector<int> text = {1, 4, 7};
  bool placed = false;
  for (std::size_t attempt = 0; attempt < 64 && !placed; ++attempt) {
    std::uint64_t s = substream(ctx.seed, "grad:end_to_end:retry:" + std::to_string(attempt));
    model = build_toy_model(cfg, s);
    upcycle_model(model, 0.2, s);
    // Freshly upcycled routers are zero (uniform routing), which sits exactly
    // on the top-k tie; randomize them so a margin can exist at all.
    Rng rr(substream(s, "grad:end_to_end:router"));
    for (Block& b : model.blocks) {
      if (b.is_moe()) b.moe->router.w_router = Tensor::randn({cfg.d_model, cfg.num_experts}, rr, 0.5);
    }
    Rng vr(substream(s, "grad:end_to_end:input"));
    visual = Tensor::randn({2, 5}, vr, 1.0);
    Tape probe;
    ForwardResult f = model_forward(probe, model, visual, text, cfg.synergy_tokens);
    placed = true;
    for (const RoutingRecord& rec : f.records) {
      if (min_topk_margin(rec.probs, cfg.top_k) <= 1e-3) placed = false;
    }
  }
  if (!placed) throw OracleError("could not seed a tie-free end-to-end fixture");

  TeacherFeatures teachers =
      make_mock_teachers(substream(ctx.seed, "teacher"), cfg.synergy_tokens, cfg.d_align_t, cfg.d_align_g);
  const double alpha = 0.1;

  // Only model parameters: the visual input enters the tape as a constant,
  // so no gradient flows to it by construction.
  std::vector<ParamRef> params;
  for (const NamedParam& p : enumerate_params(model)) params.push_back({p.name, p.tensor});

  run_path(ctx, "end_to_end", 1e-4,
           [&](bool back) {
             Tape t;
             ForwardResult f = model_forward(t, model, visual, text, cfg.synergy_tokens);
             std::vector<std::size_t> rows;
             for (std::size_t i = 0; i < text.size(); ++i) rows.push_back(f.visual_len - 1 + i);
             NodeId ce = t.cross_entropy(t.gather_rows(f.logits, rows), text);
             auto [fv, fg] = project_synergy_tape(t, f.synergy, model.alignment);
             NodeId coarse = coarse_loss_tape(t, fv, fg, teachers);
             NodeId aux = load_balance_loss_tape(t, f.moe_probs[0]);
             for (std::size_t l = 1; l < f.moe_probs.size(); ++l) {
               aux = t.add(aux, load_balance_loss_tape(t, f.moe_probs[l]));
             }
             aux = t.scale(aux, 1.0 / static_cast<double>(f.moe_probs.size()));
             NodeId loss = t.add(t.add(ce, coarse), t.scale(aux, alpha));
             double v = t.value(loss).item();
             if (back) t.backward(loss);
             return v;
           },
           params, /*subsample=*/true);
}

}  // namespace

std::vector<GradPathResult> run_grad_suite(std::uint64_t seed, double eps, std::size_t max_coords,
                                           const std::string& corrupt_op) {
  std::string previous = backward_corruption();
  set_backward_corruption(corrupt_op);
  std::vector<GradPathResult> out;
  try {
    SuiteContext ctx{seed, eps, max_coords, &out};
    add_op_paths(ctx);
    add_expert_path(ctx);
    add_alignment_path(ctx);
    add_moe_path(ctx);
    add_end_to_end_path(ctx);
  } catch (...) {
    set_backward_corruption(previous);
    throw;
  }
  set_backward_corruption(previous);
  return out;
}

// ---- routing telemetry aggregation ----

RouteStats compute_route_stats(const std::string& run_dir) {
  std::string path = run_dir + "/routing.csv";
  std::ifstream in(path);
  if (!in) throw DataError("run has no routing telemetry: " + path);
  std::string header;
  std::getline(in, header);
  if (header != "layer,expert,token_fraction,mean_prob,step") {
    throw DataError("unexpected routing.csv header: " + header);
  }
  struct Row {
    std::size_t layer, expert, step;
    double frac, mean;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Row r;
    unsigned long layer, expert, step;
    if (std::sscanf(line.c_str(), "%lu,%lu,%lf,%lf,%lu", &layer, &expert, &r.frac, &r.mean, &step) !=
        5) {
      throw DataError("bad routing.csv row at line " + std::to_string(line_no));
    }
    r.layer = layer;
    r.expert = expert;
    r.step = step;
    rows.push_back(r);
  }
  if (rows.empty()) throw DataError("routing telemetry is empty: " + path);

  RouteStats stats;
  stats.step = 0;
  for (const Row& r : rows) stats.step = std::max(stats.step, r.step);

  std::vector<Row> last;
  for (const Row& r : rows) {
    if (r.step == stats.step) last.push_back(r);
  }
  std::sort(last.begin(), last.end(), [](const Row& a, const Row& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.expert < b.expert;
  });
  stats.max_share = 0.0;
  stats.min_share = 1.0;
  double lb_sum = 0.0;
  for (std::size_t i = 0; i < last.size();) {
    std::size_t j = i;
    while (j < last.size() && last[j].layer == last[i].layer) ++j;
    stats.layers.push_back(last[i].layer);
    std::vector<double> f, g;
    for (std::size_t k = i; k < j; ++k) {
      f.push_back(last[k].frac);
      g.push_back(last[k].mean);
      stats.max_share = std::max(stats.max_share, last[k].frac);
      stats.min_share = std::min(stats.min_share, last[k].frac);
    }
    double dot = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) dot += f[k] * g[k];
    lb_sum += static_cast<double>(f.size()) * dot;
    stats.fractions.push_back(std::move(f));
    stats.mean_probs.push_back(std::move(g));
    i = j;
  }
  stats.lb_loss = lb_sum / static_cast<double>(stats.layers.size());
  return stats;
}

void write_route_stats_csv(const RouteStats& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "layer,expert,token_fraction,mean_prob\n";
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    for (std::size_t e = 0; e < stats.fractions[l].size(); ++e) {
      out << stats.layers[l] << ',' << e << ',' << fmt17(stats.fractions[l][e]) << ','
          << fmt17(stats.mean_probs[l][e]) << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

std::string route_stats_summary(const RouteStats& stats) {
  std::ostringstream ss;
  ss << "final logged step " << stats.step << " over " << stats.layers.size()
     << " moe layer(s): max expert share " << stats.max_share << ", min expert share "
     << stats.min_share << ", load-balance loss " << stats.lb_loss;
  return ss.str();
}

// ---- ablation grids ----

std::vector<AblateRow> run_ablation(const RunConfig& base, const std::string& axis) {
  if (axis != "experts" && axis != "placement") {
    throw ParameterError("ablate axis must be 'experts' or 'placement', got '" + axis + "'");
  }
  std::vector<AblateRow> rows;
  auto run_variant = [&](const std::string& variant, ModelConfig mc) {
    mc.layers = base.ablate_layers;
    mc.validate();
    ToyModel model = build_toy_model(mc, base.seed);
    upcycle_model(model, base.noise_scale, base.seed);
    TrainData data = make_caption_data(base.data, mc, base.seed);
    StageConfig sc = default_stage_config("stage_2_2");
    sc.losses = {"cross_entropy", "aux"};
    sc.trainable = {"router", "ffn_experts"};
    sc.lr = 1e-3;
    sc.warmup_ratio = 0.0;
    sc.schedule = "constant";
    sc.weight_decay = 0.0;
    sc.steps = base.ablate_steps;
    StageReport rep =
        train_stage(model, sc, data, base.seed, LossWeights{base.alpha}, base.batch, sc.steps);
    AblateRow row;
    row.axis = axis;
    row.variant = variant;
    row.moe_layers = model.schedule.moe_layer_indices.size();
    row.final_loss = rep.final_loss;
    row.final_aux = rep.curve.empty() ? 0.0 : rep.curve.back().aux;
    row.max_share = 0.0;
    row.min_share = 1.0;
    std::size_t last_step = rep.curve.empty() ? 0 : rep.curve.back().step;
    for (const TelemetryRow& r : rep.telemetry) {
      if (r.step != last_step) continue;
      row.max_share = std::max(row.max_share, r.token_fraction);
      row.min_share = std::min(row.min_share, r.token_fraction);
    }
    rows.push_back(std::move(row));
  };

  if (axis == "experts") {
    for (std::size_t m : {std::size_t{2}, std::size_t{3}, std::size_t{4}}) {
      ModelConfig mc = base.model;
      mc.num_experts = m;
      mc.top_k = std::min(base.model.top_k, m);
      mc.placement = "interval(4)";
      run_variant("M=" + std::to_string(m), mc);
    }
  } else {
    for (const char* p : {"first_half", "last_half", "interval(4)", "full"}) {
      ModelConfig mc = base.model;
      mc.placement = p;
      run_variant(p, mc);
    }
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblateRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "axis,variant,moe_layers,final_loss,final_aux,max_share,min_share\n";
  for (const AblateRow& r : rows) {
    out << r.axis << ',' << r.variant << ',' << r.moe_layers << ',' << fmt17(r.final_loss) << ','
        << fmt17(r.final_aux) << ',' << fmt17(r.max_share) << ',' << fmt17(r.min_share) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace polyv
