#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "polyv/csqa.hpp"
#include "polyv/error.hpp"
#include "polyv/model.hpp"
#include "polyv/rng.hpp"
#include "polyv/trainer.hpp"

using namespace polyv;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 8;
  cfg.d_hidden = 12;
  cfg.d_vis = 5;
  cfg.vocab = 16;
  cfg.heads = 2;
  cfg.num_experts = 3;
  cfg.top_k = 2;
  cfg.placement = "full";
  cfg.synergy_tokens = 2;
  cfg.d_align_t = 6;
  cfg.d_align_g = 5;
  cfg.d_align_hidden = 7;
  cfg.init_std = 0.15;
  return cfg;
}

DataConfig tiny_data() {
  DataConfig d;
  d.dataset_size = 8;
  d.caption_classes = 4;
  d.caption_length = 5;
  d.visual_tokens = 3;
  d.max_seq = 16;
  return d;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("stage defaults encode the four-stage recipe") {
  const auto& names = canonical_stage_names();
  REQUIRE(names == std::vector<std::string>{"stage_1_1", "stage_1_2", "stage_2_1", "stage_2_2"});

  StageConfig s11 = default_stage_config("stage_1_1");
  CHECK(s11.trainable == std::vector<std::string>{"projector"});
  CHECK(s11.losses == std::vector<std::string>{"cross_entropy"});
  CHECK(s11.lr == 2e-5);
  CHECK(s11.weight_decay == 0.05);
  CHECK(s11.warmup_ratio == 0.03);
  CHECK(s11.schedule == "cosine");

  StageConfig s12 = default_stage_config("stage_1_2");
  CHECK(s12.trainable == std::vector<std::string>{"ffn_experts"});
  CHECK(s12.lr == 2e-6);

  StageConfig s21 = default_stage_config("stage_2_1");
  CHECK(s21.trainable == std::vector<std::string>{"router", "alignment", "ffn_experts"});
  CHECK(s21.trainable_phase_a == std::vector<std::string>{"router", "alignment"});
  CHECK(s21.phase_a_fraction == 0.3);
  CHECK(s21.losses == std::vector<std::string>{"coarse", "aux"});
  CHECK(s21.lr == 1e-4);
  CHECK(s21.warmup_ratio == 0.05);

  StageConfig s22 = default_stage_config("stage_2_2");
  CHECK(s22.trainable == std::vector<std::string>{"router", "ffn_experts"});
  CHECK(s22.losses == std::vector<std::string>{"cross_entropy", "aux"});
  CHECK(s22.lr == 1e-5);
  CHECK(s22.weight_decay == 0.1);
  CHECK(s22.schedule == "constant");

  CHECK_THROWS_AS(default_stage_config("stage_9"), ParameterError);
}

TEST_CASE("freeze masks keep the backbone frozen in every stage") {
  auto frozen_everywhere = {ParamGroup::kAttention, ParamGroup::kEmbedding, ParamGroup::kLayerNorm,
                            ParamGroup::kHead};
  for (const std::string& name : canonical_stage_names()) {
    StageConfig sc = default_stage_config(name);
    for (bool phase_a : {false, true}) {
      FreezeMask mask = make_freeze_mask(sc, phase_a);
      for (ParamGroup g : frozen_everywhere) CHECK_FALSE(mask.is_trainable(g));
    }
  }

  FreezeMask m11 = make_freeze_mask(default_stage_config("stage_1_1"));
  CHECK(m11.is_trainable(ParamGroup::kProjector));
  std::size_t on = 0;
  for (std::size_t g = 0; g < kNumParamGroups; ++g) on += m11.trainable[g] ? 1 : 0;
  CHECK(on == 1);  // projector only

  StageConfig s21 = default_stage_config("stage_2_1");
  FreezeMask warm = make_freeze_mask(s21, true);
  CHECK(warm.is_trainable(ParamGroup::kRouter));
  CHECK(warm.is_trainable(ParamGroup::kAlignment));
  CHECK_FALSE(warm.is_trainable(ParamGroup::kFfnExperts));
  FreezeMask main = make_freeze_mask(s21, false);
  CHECK(main.is_trainable(ParamGroup::kFfnExperts));
}

TEST_CASE("learning-rate schedule ramps then decays") {
  StageConfig sc = default_stage_config("stage_1_1");
  sc.steps = 100;
  sc.warmup_ratio = 0.03;  // 3 warmup steps
  sc.lr = 3e-4;
  CHECK(lr_at(0, sc) == 0.0);
  CHECK(lr_at(1, sc) == doctest::Approx(sc.lr / 3.0).epsilon(1e-15));
  CHECK(lr_at(3, sc) == sc.lr);  // cosine start, progress 0
  CHECK(lr_at(100, sc) == doctest::Approx(0.0).epsilon(1e-12));
  double mid = lr_at(51, sc);  // halfway: close to lr/2 but not above start
  CHECK(mid < lr_at(3, sc));
  CHECK(mid > lr_at(99, sc));
  CHECK_THROWS_AS(lr_at(101, sc), ParameterError);

  sc.schedule = "constant";
  CHECK(lr_at(50, sc) == sc.lr);
  CHECK(lr_at(0, sc) == 0.0);  // warmup still applies
}

TEST_CASE("adamw first step matches the closed form and skips frozen groups") {
  Tensor w({2}, {0.5, -0.25});
  Tensor frozen({1}, {2.0});
  std::vector<NamedParam> params = {{"w", ParamGroup::kProjector, &w},
                                    {"f", ParamGroup::kHead, &frozen}};
  FreezeMask mask;
  mask.trainable[static_cast<std::size_t>(ParamGroup::kProjector)] = true;

  w.grad() = {0.3, -0.7};
  frozen.grad() = {100.0};
  double lr = 1e-2, wd = 0.1;
  double theta0[2] = {0.5, -0.25}, g[2] = {0.3, -0.7};

  AdamW opt;
  opt.step(params, mask, lr, wd);

  for (int i = 0; i < 2; ++i) {
    double m = (1.0 - 0.9) * g[i];
    double v = (1.0 - 0.999) * g[i] * g[i];
    double mhat = m / (1.0 - 0.9);
    double vhat = v / (1.0 - 0.999);
    double expect = theta0[i] - lr * (mhat / (std::sqrt(vhat) + 1e-8) + wd * theta0[i]);
    CHECK(w.at(static_cast<std::size_t>(i)) == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(frozen.at(0) == 2.0);  // bit identical: no moments, no decay

  // Second step uses accumulated moments, so the step size shrinks.
  Tensor w2 = w;
  w.grad() = {0.3, -0.7};
  opt.step(params, mask, lr, wd);
  CHECK(w.at(0) != w2.at(0));
}

TEST_CASE("hash tokenization is deterministic, bounded, and capped") {
  auto a = hash_tokenize("the red ball moves", 16, 32);
  auto b = hash_tokenize("the red ball moves", 16, 32);
  CHECK(a == b);
  REQUIRE(a.size() == 4);
  for (int id : a) {
    CHECK(id >= 0);
    CHECK(id < 16);
  }
  CHECK(a[0] == hash_tokenize("the", 16, 32)[0]);  // per-word hashing
  CHECK(hash_tokenize("", 16, 32) == std::vector<int>{0});
  CHECK(hash_tokenize("a b c d e", 16, 3).size() == 3);
  // Same word, same id, independent of position.
  auto rep = hash_tokenize("ball ball", 16, 32);
  CHECK(rep[0] == rep[1]);
}

TEST_CASE("caption pool is class-conditional and seeded") {
  DataConfig d = tiny_data();
  ModelConfig m = tiny_model();
  TrainData t1 = make_caption_data(d, m, 7);
  TrainData t2 = make_caption_data(d, m, 7);
  TrainData t3 = make_caption_data(d, m, 8);
  REQUIRE(t1.samples.size() == 8);

  for (std::size_t i = 0; i < 8; ++i) {
    const Sample& s = t1.samples[i];
    CHECK(s.visual.rows() == d.visual_tokens);
    CHECK(s.visual.cols() == m.d_vis);
    REQUIRE(s.text.size() == d.caption_length);
    CHECK(s.text[0] == static_cast<int>(i % d.caption_classes));  // class marker token

    // Same class means identical visual code and caption.
    const Sample& same = t1.samples[(i + d.caption_classes) % 8];
    for (std::size_t k = 0; k < s.visual.numel(); ++k) CHECK(s.visual.at(k) == same.visual.at(k));
    CHECK(s.text == same.text);

    for (std::size_t k = 0; k < s.visual.numel(); ++k) CHECK(s.visual.at(k) == t2.samples[i].visual.at(k));
    CHECK(s.text == t2.samples[i].text);
  }
  bool differs = false;
  for (std::size_t i = 0; i < 8 && !differs; ++i) {
    differs = t1.samples[i].text != t3.samples[i].text;
  }
  CHECK(differs);  // different seed, different pool
}

TEST_CASE("stage-2-2 data interleaves captions with tokenized qa text") {
  TempDir tmp("polyv_stage22_data_test");
  DataConfig d = tiny_data();
  ModelConfig m = tiny_model();

  d.csqa_path = (tmp.path / "missing.jsonl").string();
  CHECK_THROWS_WITH_AS(make_stage22_data(d, m, 7), doctest::Contains("gen-csqa"), TrainingError);

  // Write a tiny QA corpus through the real emitter.
  Rng rng(substream(3, "csqa-pairs"));
  std::vector<QAPair> qas;
  for (int i = 0; i < 3 && qas.size() < 4; ++i) {
    PairedSceneGraph pair = random_paired_graph(rng);
    auto qa = generate_pair_qas(pair, 11, 8);
    qas.insert(qas.end(), qa.begin(), qa.end());
  }
  REQUIRE(qas.size() >= 2);
  d.csqa_path = (tmp.path / "qa.jsonl").string();
  emit_jsonl(qas, d.csqa_path);

  d.csqa_mix = 0.5;
  TrainData mixed = make_stage22_data(d, m, 7);
  REQUIRE(mixed.samples.size() == d.dataset_size);
  std::size_t qa_samples = 0;
  for (const Sample& s : mixed.samples) {
    if (s.visual.rows() == 0) ++qa_samples;  // QA samples are text-only
  }
  CHECK(qa_samples == d.dataset_size / 2);

  d.csqa_mix = 0.0;
  TrainData none = make_stage22_data(d, m, 7);
  for (const Sample& s : none.samples) CHECK(s.visual.rows() == d.visual_tokens);
}

TEST_CASE("train stage moves only unfrozen groups and logs a curve") {
  ModelConfig mc = tiny_model();
  ToyModel model = build_toy_model(mc, 3);
  DataConfig dc = tiny_data();
  TrainData data = make_caption_data(dc, mc, 3);

  StageConfig sc = default_stage_config("stage_1_1");
  sc.steps = 6;
  sc.lr = 1e-3;
  LossWeights w;
  w.alpha = 0.01;
  StageReport rep = train_stage(model, sc, data, 5, w, 4, 2);

  CHECK(rep.stage == "stage_1_1");
  CHECK(rep.steps == 6);
  REQUIRE(rep.curve.size() == 4);  // steps 0, 2, 4, 5
  CHECK(rep.curve.front().step == 0);
  CHECK(rep.curve.back().step == 5);
  CHECK(rep.initial_loss == rep.curve.front().total);
  CHECK(rep.final_loss == rep.curve.back().total);
  for (const CurveRow& row : rep.curve) {
    CHECK(row.total == doctest::Approx(row.cross_entropy + row.coarse + row.aux).epsilon(1e-12));
    CHECK(std::isfinite(row.total));
  }

  CHECK(rep.delta_norms[static_cast<std::size_t>(ParamGroup::kProjector)] > 0.0);
  for (ParamGroup g : {ParamGroup::kAttention, ParamGroup::kEmbedding, ParamGroup::kLayerNorm,
                       ParamGroup::kHead, ParamGroup::kFfnExperts, ParamGroup::kRouter,
                       ParamGroup::kAlignment}) {
    CHECK(rep.delta_norms[static_cast<std::size_t>(g)] == 0.0);  // exactly zero, never touched
  }
}

TEST_CASE("training on an upcycled model emits routing telemetry that sums to one") {
  ModelConfig mc = tiny_model();
  ToyModel model = build_toy_model(mc, 3);
  upcycle_model(model, 0.01, 4);
  DataConfig dc = tiny_data();
  TrainData data = make_caption_data(dc, mc, 3);

  StageConfig sc = default_stage_config("stage_2_2");
  sc.steps = 4;
  LossWeights w;
  w.alpha = 0.01;
  StageReport rep = train_stage(model, sc, data, 5, w, 4, 2);

  REQUIRE_FALSE(rep.telemetry.empty());
  std::map<std::pair<std::size_t, std::size_t>, double> sums;  // (step, layer) -> fraction sum
  for (const TelemetryRow& row : rep.telemetry) {
    sums[{row.step, row.layer}] += row.token_fraction;
    CHECK(row.mean_prob >= 0.0);
    CHECK(row.mean_prob <= 1.0);
  }
  for (const auto& [key, s] : sums) CHECK(std::abs(s - 1.0) < 1e-9);
  REQUIRE_FALSE(rep.routing_entropy.empty());
  for (double e : rep.routing_entropy) {
    CHECK(e >= 0.0);
    CHECK(e <= std::log(static_cast<double>(mc.num_experts)) + 1e-12);
  }
  CHECK(rep.delta_norms[static_cast<std::size_t>(ParamGroup::kRouter)] > 0.0);
  CHECK(rep.delta_norms[static_cast<std::size_t>(ParamGroup::kAlignment)] == 0.0);
}

TEST_CASE("diverging runs abort with a training error, not a crash") {
  ModelConfig mc = tiny_model();
  ToyModel model = build_toy_model(mc, 3);
  DataConfig dc = tiny_data();
  TrainData data = make_caption_data(dc, mc, 3);

  StageConfig sc = default_stage_config("stage_1_1");
  sc.trainable = {"projector", "attention", "embedding", "layernorm", "head", "ffn_experts"};
  sc.steps = 80;
  sc.lr = 1e8;
  sc.warmup_ratio = 0.0;
  LossWeights w;
  CHECK_THROWS_AS(train_stage(model, sc, data, 5, w, 4, 10), TrainingError);
}

TEST_CASE("run config json round-trips and rejects unknown keys") {
  RunConfig cfg = run_config_from_json_text(R"({
    "layers": 2, "d_model": 8, "d_hidden": 12, "d_vis": 5, "vocab": 16, "heads": 2,
    "num_experts": 3, "top_k": 2, "placement": "full",
    "stages": ["stage_1_1"],
    "alpha": 0.02, "seed": 9,
    "stage_1_1.steps": 7, "stage_1_1.lr": 0.001
  })");
  CHECK(cfg.model.layers == 2);
  CHECK(cfg.model.num_experts == 3);
  CHECK(cfg.alpha == 0.02);
  CHECK(cfg.seed == 9);
  CHECK(cfg.stage_config("stage_1_1").steps == 7);
  CHECK(cfg.stage_config("stage_1_1").lr == 0.001);
  CHECK(cfg.stage_config("stage_1_1").weight_decay == 0.05);  // untouched default
  CHECK(cfg.stage_config("stage_1_2").steps == default_stage_config("stage_1_2").steps);

  // Echo and reparse: the effective config is stable.
  std::string echoed = run_config_to_json_text(cfg);
  RunConfig cfg2 = run_config_from_json_text(echoed);
  CHECK(run_config_to_json_text(cfg2) == echoed);

  CHECK_THROWS_AS(run_config_from_json_text(R"({"laysers": 2})"), ParameterError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"stage_1_1.colour": 1})"), ParameterError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"stage_1_3.lr": 1e-3})"), ParameterError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"stages": ["stage_2_1", "stage_1_1"]})"),
                  ParameterError);  // out of canonical order
  CHECK_THROWS_AS(run_config_from_json_text("{nope"), DataError);  // malformed JSON

  try {
    run_config_from_json_text("{\"layers\": }");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("column") != std::string::npos);
  }
}

TEST_CASE("run_training writes artifacts, resumes, and reruns byte-identically") {
  TempDir a("polyv_run_a"), b("polyv_run_b");

  RunConfig cfg = run_config_from_json_text(R"({
    "layers": 2, "d_model": 8, "d_hidden": 12, "d_vis": 5, "vocab": 16, "heads": 2,
    "num_experts": 3, "top_k": 2, "placement": "full", "synergy_tokens": 2,
    "d_align_t": 6, "d_align_g": 5, "d_align_hidden": 7,
    "dataset_size": 8, "caption_classes": 4, "caption_length": 5, "visual_tokens": 3,
    "batch": 4, "log_every": 2, "seed": 11,
    "stages": ["stage_1_1", "stage_2_1"],
    "stage_1_1.steps": 4, "stage_2_1.steps": 5
  })");

  run_training(cfg, a.path.string());
  for (const char* f : {"config.json", "curve.csv", "routing.csv", "report.json"}) {
    CHECK(fs::exists(a.path / f));
  }
  CHECK(fs::exists(a.path / "checkpoints" / "stage_1_1.ckpt"));
  CHECK(fs::exists(a.path / "checkpoints" / "stage_2_1.ckpt"));
  CHECK(fs::exists(a.path / "reports" / "stage_1_1.json"));

  run_training(cfg, b.path.string());
  for (const char* f : {"config.json", "curve.csv", "routing.csv", "report.json"}) {
    CHECK(read_file(a.path / f) == read_file(b.path / f));
  }

  // The curve carries both stages with globally increasing steps.
  std::istringstream curve(read_file(a.path / "curve.csv"));
  std::string line;
  std::getline(curve, line);
  CHECK(line == "step,stage,total,cross_entropy,coarse,aux,lr");
  long last = -1;
  std::set<std::string> stages_seen;
  while (std::getline(curve, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string step_s, stage_s;
    std::getline(row, step_s, ',');
    std::getline(row, stage_s, ',');
    long step = std::stol(step_s);
    CHECK(step > last);
    last = step;
    stages_seen.insert(stage_s);
  }
  CHECK(stages_seen == std::set<std::string>{"stage_1_1", "stage_2_1"});

  // Resume: drop the run-level artifacts but keep stage checkpoints; the
  // rerun must reuse them and produce identical reports.
  std::string report_before = read_file(a.path / "report.json");
  fs::remove(a.path / "report.json");
  fs::remove(a.path / "curve.csv");
  run_training(cfg, a.path.string());
  CHECK(read_file(a.path / "report.json") == report_before);
  CHECK(read_file(a.path / "curve.csv") == read_file(b.path / "curve.csv"));

  // Empty stage list: config echo plus header-only CSVs.
  TempDir c("polyv_run_c");
  RunConfig none = cfg;
  none.stages.clear();
  run_training(none, c.path.string());
  CHECK(read_file(c.path / "curve.csv") == "step,stage,total,cross_entropy,coarse,aux,lr\n");
  std::string routing = read_file(c.path / "routing.csv");
  CHECK(routing.substr(0, routing.find('\n')) == "layer,expert,token_fraction,mean_prob,step");
}

TEST_CASE("stage_2_2 in the stage list requires a qa corpus on disk") {
  TempDir t("polyv_run_need_qa");
  RunConfig cfg = run_config_from_json_text(R"({
    "layers": 2, "d_model": 8, "d_hidden": 12, "d_vis": 5, "vocab": 16, "heads": 2,
    "num_experts": 3, "top_k": 2, "placement": "full", "synergy_tokens": 2,
    "d_align_t": 6, "d_align_g": 5, "d_align_hidden": 7,
    "dataset_size": 8, "batch": 4, "seed": 11,
    "stages": ["stage_2_2"], "stage_2_2.steps": 2,
    "csqa_path": "/nonexistent/qa.jsonl"
  })");
  CHECK_THROWS_WITH_AS(run_training(cfg, t.path.string()), doctest::Contains("gen-csqa"),
                       TrainingError);
}
