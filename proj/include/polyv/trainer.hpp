#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "polyv/model.hpp"
#include "polyv/synergy.hpp"
#include "polyv/tensor.hpp"

namespace polyv {

// One training stage: which parameter groups move, which loss terms are on,
// and the optimizer schedule. Defaults per stage follow the four-stage
// recipe; every field is config-overridable.
struct StageConfig {
  std::string name;                            // stage_1_1 .. stage_2_2
  std::vector<std::string> trainable;          // parameter groups (main phase)
  std::vector<std::string> trainable_phase_a;  // used while step < phase_a_fraction * steps
  double phase_a_fraction = 0.0;
  std::vector<std::string> losses;             // subset of {cross_entropy, coarse, aux}
  double lr = 1e-4;
  double warmup_ratio = 0.03;
  std::string schedule = "cosine";             // cosine | constant
  double weight_decay = 0.05;
  std::size_t steps = 100;

  void validate() const;
};

// Stage defaults: lr / weight decay / warmup / schedule per the four-stage
// recipe (2e-5, 2e-6, 1e-4, 1e-5; decay 0.05 except 0.1 last; warmup 0.03 /
// 0.03 / 0.05 / 0.05; cosine except constant last), plus the freeze sets
// quoted per stage.
StageConfig default_stage_config(const std::string& name);
const std::vector<std::string>& canonical_stage_names();

struct FreezeMask {
  std::array<bool, kNumParamGroups> trainable{};
  bool is_trainable(ParamGroup g) const { return trainable[static_cast<std::size_t>(g)]; }
};

// phase_a selects the stage_2_1 warm phase mask; other stages ignore it.
FreezeMask make_freeze_mask(const StageConfig& stage, bool phase_a = false);

// Linear ramp 0 -> lr across round(warmup_ratio * steps), then cosine decay
// to 0 at cfg.steps (or flat lr for schedule = constant).
double lr_at(std::size_t step, const StageConfig& cfg);

// Decoupled-weight-decay adaptive moments (beta 0.9 / 0.999, eps 1e-8).
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates trainable parameters from their grad buffers; frozen parameters
  // are untouched (no moment state either).
  void step(const std::vector<NamedParam>& params, const FreezeMask& mask, double lr,
            double weight_decay);

 private:
  struct Moments {
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::unordered_map<Tensor*, Moments> moments_;
};

struct Sample {
  Tensor visual;            // P x d_vis
  std::vector<int> text;    // caption / QA token ids, length >= 1
};

struct TrainData {
  std::vector<Sample> samples;  // fixed pool, cycled round-robin per step
};

struct DataConfig {
  std::size_t dataset_size = 64;
  std::size_t caption_classes = 4;
  std::size_t caption_length = 6;
  std::size_t visual_tokens = 4;
  std::size_t max_seq = 32;
  double csqa_mix = 0.5;      // stage_2_2 fraction of QA samples
  std::string csqa_path;      // JSONL; required when stage_2_2 runs

  void validate() const;
};

// Class-conditional captioning pool: each class gets a fixed random visual
// code and a fixed random caption, so captions are predictable from the
// visual prefix alone.
TrainData make_caption_data(const DataConfig& data, const ModelConfig& model, std::uint64_t seed);
// Caption pool interleaved (Bresenham on csqa_mix) with tokenized QA text
// from the JSONL at csqa_path.
TrainData make_stage22_data(const DataConfig& data, const ModelConfig& model, std::uint64_t seed);
// Whitespace tokens hashed into the vocabulary.
std::vector<int> hash_tokenize(const std::string& text, std::size_t vocab, std::size_t max_len);

struct CurveRow {
  std::size_t step = 0;
  double total = 0, cross_entropy = 0, coarse = 0, aux = 0, lr = 0;
};

struct TelemetryRow {
  std::size_t layer = 0, expert = 0;
  double token_fraction = 0, mean_prob = 0;
  std::size_t step = 0;
};

struct StageReport {
  std::string stage;
  std::size_t steps = 0;
  std::vector<CurveRow> curve;            // logged steps only
  std::vector<TelemetryRow> telemetry;
  std::vector<double> routing_entropy;    // per logged step, mean over MoE layers
  std::array<double, kNumParamGroups> delta_norms{};
  double initial_loss = 0, final_loss = 0;
  double initial_coarse = 0, final_coarse = 0;
  double initial_ce = 0, final_ce = 0;
};

// Runs cfg.steps updates under the stage freeze mask. Deterministic per
// (model state, stage, data, seed). Throws TrainingError naming the loss
// term if any enabled term goes non-finite.
StageReport train_stage(ToyModel& model, const StageConfig& stage, const TrainData& data,
                        std::uint64_t seed, const LossWeights& weights, std::size_t batch,
                        std::size_t log_every);

// Flat-JSON run configuration; unknown keys are rejected so typos cannot
// silently fall back to defaults.
struct RunConfig {
  ModelConfig model;
  DataConfig data;
  std::vector<std::string> stages = canonical_stage_names();  // ordered subset of the canonical four
  std::unordered_map<std::string, StageConfig> stage_overrides;  // keyed by stage name
  double alpha = 0.01;         // aux-loss weight on the balance term
  double noise_scale = 0.01;   // upcycling perturbation
  std::size_t batch = 8;
  std::size_t log_every = 10;
  std::uint64_t seed = 1;
  // gradient-suite knobs
  std::size_t grad_seeds = 20;
  double grad_eps = 1e-5;
  std::size_t grad_max_coords = 24;
  std::string grad_corrupt_op;  // fault-injection fixture
  // ablation knobs
  std::size_t ablate_steps = 40;
  std::size_t ablate_layers = 28;

  StageConfig stage_config(const std::string& name) const;
  void validate() const;
};

RunConfig run_config_from_json_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json_text(const RunConfig& cfg);

// Executes the requested stages in order inside out_dir, writing config.json,
// curve.csv, routing.csv, report.json, and per-stage checkpoints/reports.
// Stages whose checkpoint + report already exist are loaded, not re-trained,
// so an interrupted run resumes at the last stage boundary.
void run_training(const RunConfig& cfg, const std::string& out_dir);

}  // namespace polyv
