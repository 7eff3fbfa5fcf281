// Command-line entry point wiring every module: gradient verification,
// staged training, routing telemetry, placement/expert ablations, coordinate
// lifting, and synergy-QA generation. Exit codes: 0 success, 1 domain or
// validation error, 2 internal invariant breach.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "polyv/analysis.hpp"
#include "polyv/csqa.hpp"
#include "polyv/error.hpp"
#include "polyv/geometry.hpp"
#include "polyv/model.hpp"
#include "polyv/trainer.hpp"

namespace {

using polyv::RunConfig;

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string seed;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config, "flat JSON run configuration file");
  sub->add_option("--set", o.sets,
                  "override one config key (key=value, JSON literal or bare string); repeatable");
  sub->add_option("--seed", o.seed, "override the root seed");
}

// Config plus flag overrides, validated as a whole before any work runs.
RunConfig load_cfg(const CommonOpts& o) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw polyv::IoError("cannot open config file: " + o.config);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      doc = nlohmann::ordered_json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw polyv::DataError(std::string("run config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw polyv::DataError("run config must be a JSON object");
  }
  for (const std::string& kv : o.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw polyv::ParameterError("--set expects key=value, got '" + kv + "'");
    }
    std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::ordered_json v = nlohmann::ordered_json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;  // bare strings need no quoting
    doc[key] = v;
  }
  if (!o.seed.empty()) {
    nlohmann::ordered_json v = nlohmann::ordered_json::parse(o.seed, nullptr, false);
    if (v.is_discarded() || !v.is_number()) throw polyv::ParameterError("--seed must be a number");
    doc["seed"] = v;
  }
  return polyv::run_config_from_json_text(doc.dump());
}

int cmd_grad_check(const CommonOpts& common, const std::string& out) {
  RunConfig cfg = load_cfg(common);
  struct Agg {
    double tol = 0.0, worst = 0.0;
    std::size_t coords = 0;
    bool pass = true;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> agg;
  for (std::size_t s = 0; s < cfg.grad_seeds; ++s) {
    std::vector<polyv::GradPathResult> res =
        polyv::run_grad_suite(cfg.seed + s, cfg.grad_eps, cfg.grad_max_coords, cfg.grad_corrupt_op);
    for (const polyv::GradPathResult& r : res) {
      if (!agg.count(r.path)) order.push_back(r.path);
      Agg& a = agg[r.path];
      a.tol = r.tolerance;
      a.worst = std::max(a.worst, r.max_rel_err);
      a.coords += r.coords_checked;
      a.pass = a.pass && r.pass;
    }
  }
  bool ok = true;
  for (const std::string& path : order) {
    const Agg& a = agg[path];
    ok = ok && a.pass;
    std::printf("%s %-24s max_rel_err=%.3e tol=%.0e coords=%zu\n", a.pass ? "PASS" : "FAIL",
                path.c_str(), a.worst, a.tol, a.coords);
  }
  std::printf("%s gradient suite: %zu paths x %zu seeds\n", ok ? "PASS" : "FAIL", order.size(),
              cfg.grad_seeds);
  if (!out.empty()) {
    std::ofstream os(out, std::ios::binary);
    if (!os) throw polyv::IoError("cannot write " + out);
    os << "path,tolerance,max_rel_err,coords,pass\n";
    char buf[64];
    for (const std::string& path : order) {
      const Agg& a = agg[path];
      std::snprintf(buf, sizeof(buf), "%.17g", a.worst);
      os << path << ',' << a.tol << ',' << buf << ',' << a.coords << ',' << (a.pass ? 1 : 0) << '\n';
    }
  }
  return ok ? 0 : 1;
}

int cmd_train(const CommonOpts& common, const std::string& out) {
  RunConfig cfg = load_cfg(common);
  polyv::run_training(cfg, out);
  std::printf("run complete: %zu stage(s) in %s\n", cfg.stages.size(), out.c_str());
  return 0;
}

int cmd_route_stats(const std::string& run_dir, std::string out) {
  polyv::RouteStats stats = polyv::compute_route_stats(run_dir);
  if (out.empty()) out = run_dir + "/route_stats.csv";
  polyv::write_route_stats_csv(stats, out);
  std::printf("%s\n", polyv::route_stats_summary(stats).c_str());
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_ablate(const CommonOpts& common, const std::string& axis, std::string out) {
  RunConfig cfg = load_cfg(common);
  std::vector<polyv::AblateRow> rows = polyv::run_ablation(cfg, axis);
  if (out.empty()) out = "ablate.csv";
  polyv::write_ablation_csv(rows, out);
  for (const polyv::AblateRow& r : rows) {
    std::printf("%s %-12s moe_layers=%zu final_loss=%.6f final_aux=%.6f max_share=%.4f\n",
                r.axis.c_str(), r.variant.c_str(), r.moe_layers, r.final_loss, r.final_aux,
                r.max_share);
  }
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_lift(const std::string& frame_file, std::string out) {
  polyv::CameraFrame frame = polyv::load_camera_frame(frame_file);
  polyv::PointMap pm = polyv::lift_to_world(frame);
  if (out.empty()) out = "point_map.txt";
  polyv::save_tensor(out, pm.coords);
  std::printf("lifted %zux%zu frame to %s\n", pm.height(), pm.width(), out.c_str());
  return 0;
}

int cmd_gen_csqa(const std::string& pairs_path, std::size_t random_pairs, std::uint64_t seed,
                 std::size_t cap, std::string out) {
  std::vector<polyv::PairedSceneGraph> pairs;
  if (random_pairs > 0) {
    polyv::Rng rng(polyv::substream(seed, "csqa-pairs"));
    for (std::size_t i = 0; i < random_pairs; ++i) {
      pairs.push_back(polyv::random_paired_graph(rng));
    }
  } else {
    if (pairs_path.empty()) {
      throw polyv::ParameterError("gen-csqa needs a pairs file/directory or --random N");
    }
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (fs::is_directory(pairs_path)) {
      for (const auto& entry : fs::directory_iterator(pairs_path)) {
        if (entry.path().extension() == ".json") files.push_back(entry.path().string());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw polyv::DataError("no .json pair files in " + pairs_path);
    } else {
      files.push_back(pairs_path);
    }
    for (const std::string& f : files) pairs.push_back(polyv::load_paired_graph(f));
  }

  std::vector<polyv::QAPair> qas;
  for (const polyv::PairedSceneGraph& pair : pairs) {
    for (polyv::QAPair& qa : polyv::generate_pair_qas(pair, seed, cap)) {
      polyv::QaJudgment j = polyv::validate_qa(pair, qa);
      if (!j.accepted) {
        throw polyv::InternalError("generated QA failed grounding: " + j.reason);
      }
      qas.push_back(std::move(qa));
    }
  }
  if (out.empty()) out = "csqa.jsonl";
  std::size_t written = polyv::emit_jsonl(qas, out);
  std::printf("wrote %zu QA pair(s) from %zu scene-graph pair(s) to %s\n", written, pairs.size(),
              out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-MoE mechanism stack: training, verification, and data tooling"};
  app.require_subcommand(1);

  CommonOpts gc_common, tr_common, ab_common;
  std::string gc_out, tr_out = "run", rs_run, rs_out, ab_axis, ab_out, lf_frame, lf_out;
  std::string gq_pairs, gq_out;
  std::size_t gq_random = 0, gq_cap = 8;
  std::uint64_t gq_seed = 1;

  CLI::App* gc = app.add_subcommand("grad-check", "finite-difference check of every gradient path");
  add_common(gc, gc_common);
  gc->add_option("--out", gc_out, "also write the per-path report CSV here");

  CLI::App* tr = app.add_subcommand("train", "run the staged training pipeline");
  add_common(tr, tr_common);
  tr->add_option("--out", tr_out, "run directory (default: run)");

  CLI::App* rs = app.add_subcommand("route-stats", "aggregate routing telemetry from a run");
  rs->add_option("run_dir", rs_run, "run directory holding routing.csv")->required();
  rs->add_option("--out", rs_out, "stats CSV path (default: <run_dir>/route_stats.csv)");

  CLI::App* ab = app.add_subcommand("ablate", "expert-count / placement comparison grid");
  add_common(ab, ab_common);
  ab->add_option("--axis", ab_axis, "experts | placement")->required();
  ab->add_option("--out", ab_out, "grid CSV path (default: ablate.csv)");

  CLI::App* lf = app.add_subcommand("lift", "lift a depth frame to world coordinates");
  lf->add_option("frame", lf_frame, "camera frame JSON (depth, K, B)")->required();
  lf->add_option("--out", lf_out, "point map output path (default: point_map.txt)");

  CLI::App* gq = app.add_subcommand("gen-csqa", "generate synergy QA pairs from scene graphs");
  gq->add_option("pairs", gq_pairs, "pair JSON file or directory of .json files");
  gq->add_option("--random", gq_random, "generate from N seeded random pairs instead of files");
  gq->add_option("--seed", gq_seed, "generation seed");
  gq->add_option("--cap", gq_cap, "max QA pairs kept per scene-graph pair");
  gq->add_option("--out", gq_out, "output JSONL path (default: csqa.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gc->parsed()) return cmd_grad_check(gc_common, gc_out);
    if (tr->parsed()) return cmd_train(tr_common, tr_out);
    if (rs->parsed()) return cmd_route_stats(rs_run, rs_out);
    if (ab->parsed()) return cmd_ablate(ab_common, ab_axis, ab_out);
    if (lf->parsed()) return cmd_lift(lf_frame, lf_out);
    if (gq->parsed()) return cmd_gen_csqa(gq_pairs, gq_random, gq_seed, gq_cap, gq_out);
    throw polyv::InternalError("no subcommand dispatched");
  } catch (const polyv::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
}
