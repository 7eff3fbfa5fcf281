#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "polyv/csqa.hpp"
#include "polyv/tensor.hpp"

// End-to-end coverage of the installed binary: exit discipline, artifact
// determinism, and flag plumbing, driven through a real shell.

using namespace polyv;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args, const fs::path& log) {
  std::string cmd = std::string("\"") + POLYV_CLI_PATH + "\" " + args + " >" + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Flags shared by the train/ablate invocations: a model small enough that
// every CLI test stays in the millisecond range.
std::string tiny_flags() {
  return "--set layers=2 --set d_model=8 --set d_hidden=12 --set d_vis=5 --set vocab=16 "
         "--set heads=2 --set num_experts=3 --set top_k=2 --set placement=full "
         "--set synergy_tokens=2 --set d_align_t=6 --set d_align_g=5 --set d_align_hidden=7 "
         "--set dataset_size=8 --set batch=4 --set seed=11";
}

}  // namespace

TEST_CASE("cli rejects unknown commands and missing arguments") {
  TempDir t("polyv_cli_basics");
  CHECK(run_cli("frobnicate", t.path / "a.log") == 1);
  CHECK(run_cli("", t.path / "b.log") == 1);           // a subcommand is required
  CHECK(run_cli("route-stats", t.path / "c.log") == 1);  // missing run_dir
  CHECK(run_cli("--help", t.path / "d.log") == 0);
  CHECK(read_file(t.path / "d.log").find("gen-csqa") != std::string::npos);
}

TEST_CASE("lift writes the exact identity point map and flags bad input") {
  TempDir t("polyv_cli_lift");
  std::ofstream(t.path / "frame.json") << R"({
    "depth": {"dims": [2, 3], "values": [1, 2, 3, 4, 5, 6]},
    "K": [1,0,0, 0,1,0, 0,0,1],
    "B": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]
  })";
  fs::path out = t.path / "pm.txt";
  CHECK(run_cli("lift " + (t.path / "frame.json").string() + " --out " + out.string(),
                t.path / "lift.log") == 0);
  Tensor pm = load_tensor(out.string());
  REQUIRE(pm.shape() == std::vector<std::size_t>{2, 3, 3});
  // pixel (i=1, j=2) at depth 6: world (j*D, i*D, D) = (12, 6, 6)
  CHECK(pm.data()[(1 * 3 + 2) * 3 + 0] == 12.0);
  CHECK(pm.data()[(1 * 3 + 2) * 3 + 1] == 6.0);
  CHECK(pm.data()[(1 * 3 + 2) * 3 + 2] == 6.0);

  std::ofstream(t.path / "broken.json") << "{\"depth\": [1,,]}";
  CHECK(run_cli("lift " + (t.path / "broken.json").string(), t.path / "bad.log") == 1);
  CHECK(read_file(t.path / "bad.log").find("column") != std::string::npos);

  CHECK(run_cli("lift " + (t.path / "absent.json").string(), t.path / "gone.log") == 1);
}

TEST_CASE("gen-csqa emits a deterministic validated corpus") {
  TempDir t("polyv_cli_gencsqa");
  fs::path a = t.path / "a.jsonl", b = t.path / "b.jsonl";
  CHECK(run_cli("gen-csqa --random 5 --seed 3 --out " + a.string(), t.path / "a.log") == 0);
  CHECK(run_cli("gen-csqa --random 5 --seed 3 --out " + b.string(), t.path / "b.log") == 0);
  std::string text = read_file(a);
  CHECK(text == read_file(b));
  CHECK_FALSE(text.empty());

  auto qas = read_qa_jsonl(a.string());
  CHECK(qas.size() > 5);
  for (const auto& qa : qas) {
    CHECK_FALSE(qa.question.empty());
    CHECK_FALSE(qa.answer.empty());
  }

  // A different seed must change the corpus.
  fs::path c = t.path / "c.jsonl";
  CHECK(run_cli("gen-csqa --random 5 --seed 4 --out " + c.string(), t.path / "c.log") == 0);
  CHECK(read_file(c) != text);

  // File mode consumes a pair document written by the library itself.
  Rng rng(substream(3, "csqa-pairs"));
  PairedSceneGraph pair = random_paired_graph(rng);
  std::ofstream(t.path / "pair.json") << paired_graph_to_json_text(pair);
  fs::path d = t.path / "d.jsonl";
  CHECK(run_cli("gen-csqa " + (t.path / "pair.json").string() + " --seed 3 --out " + d.string(),
                t.path / "d.log") == 0);
  CHECK_FALSE(read_qa_jsonl(d.string()).empty());

  // Neither a file nor --random is an input error, not a crash.
  CHECK(run_cli("gen-csqa --out " + (t.path / "none.jsonl").string(), t.path / "e.log") == 1);
}

TEST_CASE("train produces a deterministic run directory and route-stats reads it") {
  TempDir t("polyv_cli_train");
  std::string flags = tiny_flags() +
                      " --set stages='[\"stage_1_1\",\"stage_2_1\"]'"
                      " --set stage_1_1.steps=4 --set stage_2_1.steps=4 --set log_every=2";
  fs::path run1 = t.path / "run1", run2 = t.path / "run2";
  CHECK(run_cli("train " + flags + " --out " + run1.string(), t.path / "t1.log") == 0);
  CHECK(run_cli("train " + flags + " --out " + run2.string(), t.path / "t2.log") == 0);
  for (const char* f : {"config.json", "curve.csv", "routing.csv", "report.json"}) {
    CHECK(read_file(run1 / f) == read_file(run2 / f));
  }

  CHECK(run_cli("route-stats " + run1.string(), t.path / "rs.log") == 0);
  CHECK(fs::exists(run1 / "route_stats.csv"));
  std::string summary = read_file(t.path / "rs.log");
  CHECK(summary.find("layer") != std::string::npos);

  TempDir empty("polyv_cli_norun");
  CHECK(run_cli("route-stats " + empty.path.string(), t.path / "rs2.log") == 1);
  CHECK(read_file(t.path / "rs2.log").find("routing") != std::string::npos);

  // Config-file and --set plumb into the same validated config, so a typo'd
  // key fails fast with exit 1.
  CHECK(run_cli("train --set laysers=2 --out " + (t.path / "r3").string(), t.path / "t3.log") == 1);
  CHECK(read_file(t.path / "t3.log").find("laysers") != std::string::npos);

  // The same run driven by a config file instead of flags.
  std::ofstream(t.path / "cfg.json") << read_file(run1 / "config.json");
  fs::path run4 = t.path / "run4";
  CHECK(run_cli("train --config " + (t.path / "cfg.json").string() + " --out " + run4.string(),
                t.path / "t4.log") == 0);
  CHECK(read_file(run4 / "report.json") == read_file(run1 / "report.json"));
}

TEST_CASE("grad-check passes clean and fails under fault injection") {
  TempDir t("polyv_cli_grad");
  std::string fast = "--set grad_seeds=1 --set grad_max_coords=6 --set grad_eps=1e-5";
  CHECK(run_cli("grad-check " + fast + " --out " + (t.path / "ok.csv").string(),
                t.path / "ok.log") == 0);
  std::string log = read_file(t.path / "ok.log");
  CHECK(log.find("PASS") != std::string::npos);
  CHECK(log.find("FAIL") == std::string::npos);
  CHECK(read_file(t.path / "ok.csv").find("path,") == 0);

  CHECK(run_cli("grad-check " + fast + " --set grad_corrupt_op=matmul", t.path / "bad.log") == 1);
  CHECK(read_file(t.path / "bad.log").find("FAIL") != std::string::npos);
}

TEST_CASE("ablate writes one row per grid variant") {
  TempDir t("polyv_cli_ablate");
  std::string flags = tiny_flags() +
                      " --set ablate_steps=2 --set ablate_layers=4 --set dataset_size=4 "
                      "--set batch=2 --set log_every=2";
  fs::path out = t.path / "grid.csv";
  CHECK(run_cli("ablate --axis experts " + flags + " --out " + out.string(), t.path / "ab.log") == 0);
  std::istringstream csv(read_file(out));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "axis,variant,moe_layers,final_loss,final_aux,max_share,min_share");
  int rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 3);  // M = 2, 3, 4

  CHECK(run_cli("ablate --axis sideways " + flags, t.path / "bad.log") == 1);
}
