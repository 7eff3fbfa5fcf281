#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "polyv/error.hpp"
#include "polyv/model.hpp"
#include "polyv/rng.hpp"
#include "polyv/tape.hpp"

using namespace polyv;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 8;
  cfg.d_hidden = 12;
  cfg.d_vis = 5;
  cfg.vocab = 11;
  cfg.heads = 2;
  cfg.num_experts = 3;
  cfg.top_k = 2;
  cfg.placement = "full";
  cfg.synergy_tokens = 2;
  cfg.d_align_t = 6;
  cfg.d_align_g = 5;
  cfg.d_align_hidden = 7;
  cfg.init_std = 0.2;
  return cfg;
}

Tensor forward_logits(ToyModel& model, const Tensor& visual, const std::vector<int>& text,
                      std::size_t synergy) {
  Tape tape;
  ForwardResult fr = model_forward(tape, model, visual, text, synergy);
  return tape.value(fr.logits);
}

}  // namespace

TEST_CASE("model construction is deterministic per seed and validated") {
  ModelConfig cfg = small_config();
  ToyModel a = build_toy_model(cfg, 5);
  ToyModel b = build_toy_model(cfg, 5);
  ToyModel c = build_toy_model(cfg, 6);
  for (std::size_t i = 0; i < a.token_embedding.numel(); ++i) {
    CHECK(a.token_embedding.at(i) == b.token_embedding.at(i));
  }
  double diff = 0;
  for (std::size_t i = 0; i < a.token_embedding.numel(); ++i) {
    diff = std::max(diff, std::abs(a.token_embedding.at(i) - c.token_embedding.at(i)));
  }
  CHECK(diff > 1e-6);

  ModelConfig bad = cfg;
  bad.heads = 3;  // does not divide d_model = 8
  CHECK_THROWS_AS(build_toy_model(bad, 1), ParameterError);
  bad = cfg;
  bad.top_k = 9;
  CHECK_THROWS_AS(build_toy_model(bad, 1), ParameterError);
  bad = cfg;
  bad.placement = "sideways";
  CHECK_THROWS_AS(build_toy_model(bad, 1), ParameterError);
}

TEST_CASE("attention is causal: later tokens cannot affect earlier logits") {
  ModelConfig cfg = small_config();
  ToyModel model = build_toy_model(cfg, 9);
  Rng rng(90);
  Tensor visual = Tensor::randn({3, 5}, rng);

  Tensor base = forward_logits(model, visual, {1, 2, 3, 4}, 0);
  Tensor mut = forward_logits(model, visual, {1, 2, 3, 9}, 0);
  REQUIRE(base.rows() == 7);  // 3 visual + 4 text
  for (std::size_t r = 0; r + 1 < 7; ++r) {
    for (std::size_t c = 0; c < base.cols(); ++c) {
      CHECK(base.at(r, c) == mut.at(r, c));  // bit identical before the edit
    }
  }
  double diff = 0;
  for (std::size_t c = 0; c < base.cols(); ++c) diff = std::max(diff, std::abs(base.at(6, c) - mut.at(6, c)));
  CHECK(diff > 1e-9);
}

TEST_CASE("forward shapes cover visual-only, text-only, and synergy suffixes") {
  ModelConfig cfg = small_config();
  ToyModel model = build_toy_model(cfg, 9);
  Rng rng(91);
  Tensor visual = Tensor::randn({3, 5}, rng);

  Tape tape;
  ForwardResult fr = model_forward(tape, model, visual, {1, 2}, 2);
  CHECK(tape.value(fr.logits).rows() == 7);  // 3 + 2 + 2
  CHECK(fr.has_synergy);
  CHECK(fr.prefix_len == 5);
  CHECK(fr.synergy_mask == std::vector<std::size_t>{5, 6});
  CHECK(tape.value(fr.synergy).rows() == 2);
  CHECK(tape.value(fr.synergy).cols() == 8);
  CHECK(fr.visual_len == 3);
  CHECK(fr.moe_layers.empty());  // not yet upcycled

  Tape tape2;
  Tensor empty_visual({0, 5});
  ForwardResult fr2 = model_forward(tape2, model, empty_visual, {1, 2, 3}, 0);
  CHECK(tape2.value(fr2.logits).rows() == 3);
  CHECK_FALSE(fr2.has_synergy);
}

TEST_CASE("upcycling converts scheduled blocks once and preserves the function at zero noise") {
  ModelConfig cfg = small_config();
  ToyModel dense = build_toy_model(cfg, 21);
  ToyModel sparse = build_toy_model(cfg, 21);
  upcycle_model(sparse, 0.0, 33);
  CHECK(sparse.upcycled);
  for (const Block& blk : sparse.blocks) CHECK(blk.is_moe());

  Rng rng(92);
  Tensor visual = Tensor::randn({2, 5}, rng);
  Tensor a = forward_logits(dense, visual, {1, 2, 3}, 1);
  Tensor b = forward_logits(sparse, visual, {1, 2, 3}, 1);
  REQUIRE(a.same_shape(b));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);

  CHECK_THROWS_AS(upcycle_model(sparse, 0.0, 33), TrainingError);

  // Tape forward now exposes per-MoE-block routing probabilities.
  Tape tape;
  ForwardResult fr = model_forward(tape, sparse, visual, {1, 2, 3}, 1);
  CHECK(fr.moe_layers == std::vector<std::size_t>{0, 1});
  REQUIRE(fr.moe_probs.size() == 2);
  const Tensor& probs = tape.value(fr.moe_probs[0]);
  CHECK(probs.cols() == 3);
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    double s = 0;
    for (std::size_t e = 0; e < 3; ++e) s += probs.at(t, e);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("parameter enumeration is unique, grouped, and upcycle-aware") {
  ModelConfig cfg = small_config();
  ToyModel model = build_toy_model(cfg, 2);
  auto params = enumerate_params(model);
  std::set<std::string> names;
  std::set<const Tensor*> tensors;
  bool has_router = false;
  for (const auto& p : params) {
    CHECK(names.insert(p.name).second);
    CHECK(tensors.insert(p.tensor).second);
    REQUIRE(p.tensor != nullptr);
    if (p.group == ParamGroup::kRouter) has_router = true;
  }
  CHECK_FALSE(has_router);  // dense model has no routers yet

  upcycle_model(model, 0.0, 3);
  auto params2 = enumerate_params(model);
  CHECK(params2.size() > params.size());  // per-expert copies plus routers
  std::size_t routers = 0, experts = 0;
  for (const auto& p : params2) {
    if (p.group == ParamGroup::kRouter) ++routers;
    if (p.group == ParamGroup::kFfnExperts) ++experts;
  }
  CHECK(routers == 2);            // one per block under full placement
  CHECK(experts == 2 * 3 * 3);    // blocks * experts * three mats each

  CHECK(param_group_from_name("router") == ParamGroup::kRouter);
  CHECK(param_group_name(ParamGroup::kAlignment) == std::string("alignment"));
  CHECK_THROWS_AS(param_group_from_name("nonsense"), ParameterError);
}

TEST_CASE("checkpoints round-trip bitwise and refuse mismatched configs") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "polyv_model_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "model.ckpt").string();

  ModelConfig cfg = small_config();
  ToyModel a = build_toy_model(cfg, 77);
  Rng rng(93);
  Tensor visual = Tensor::randn({2, 5}, rng);
  Tensor before = forward_logits(a, visual, {4, 5, 6}, 2);
  save_model(path, a);

  ToyModel b = build_toy_model(cfg, 124);  // different seed, same shapes
  load_model(path, b);
  Tensor after = forward_logits(b, visual, {4, 5, 6}, 2);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(before.at(i) == after.at(i));

  // An upcycled checkpoint upcycles the destination on load.
  upcycle_model(a, 0.01, 5);
  Tensor up_before = forward_logits(a, visual, {4, 5, 6}, 2);
  save_model(path, a);
  ToyModel c = build_toy_model(cfg, 125);
  CHECK_FALSE(c.upcycled);
  load_model(path, c);
  CHECK(c.upcycled);
  Tensor up_after = forward_logits(c, visual, {4, 5, 6}, 2);
  for (std::size_t i = 0; i < up_before.numel(); ++i) CHECK(up_before.at(i) == up_after.at(i));

  ModelConfig other = cfg;
  other.d_model = 16;
  ToyModel d = build_toy_model(other, 1);
  CHECK_THROWS_AS(load_model(path, d), DataError);

  fs::remove_all(dir);
}
