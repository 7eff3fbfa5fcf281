#include "polyv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "polyv/error.hpp"

namespace polyv {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kLossNames[] = {"cross_entropy", "coarse", "aux"};

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void StageConfig::validate() const {
  const std::vector<std::string>& names = canonical_stage_names();
  if (!contains(names, name)) throw ParameterError("unknown stage '" + name + "'");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError(name + ": lr must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
    throw ParameterError(name + ": warmup_ratio must lie in [0, 1)");
  }
  if (schedule != "cosine" && schedule != "constant") {
    throw ParameterError(name + ": schedule must be cosine or constant");
  }
  if (weight_decay < 0.0 || !std::isfinite(weight_decay)) {
    throw ParameterError(name + ": weight_decay must be nonnegative");
  }
  if (losses.empty()) throw ParameterError(name + ": needs at least one loss term");
  for (const std::string& l : losses) {
    if (l != "cross_entropy" && l != "coarse" && l != "aux") {
      throw ParameterError(name + ": unknown loss term '" + l + "'");
    }
  }
  if (trainable.empty()) throw ParameterError(name + ": needs at least one trainable group");
  for (const std::string& g : trainable) param_group_from_name(g);
  for (const std::string& g : trainable_phase_a) param_group_from_name(g);
  if (phase_a_fraction < 0.0 || phase_a_fraction > 1.0) {
    throw ParameterError(name + ": phase_a_fraction must lie in [0, 1]");
  }
  if (phase_a_fraction > 0.0 && trainable_phase_a.empty()) {
    throw ParameterError(name + ": phase A needs trainable groups");
  }
}

const std::vector<std::string>& canonical_stage_names() {
  static const std::vector<std::string> names = {"stage_1_1", "stage_1_2", "stage_2_1", "stage_2_2"};
  return names;
}

StageConfig default_stage_config(const std::string& name) {
  StageConfig c;
  c.name = name;
  if (name == "stage_1_1") {
    c.trainable = {"projector"};
    c.losses = {"cross_entropy"};
    c.lr = 2e-5;
    c.weight_decay = 0.05;
    c.warmup_ratio = 0.03;
    c.schedule = "cosine";
    c.steps = 300;
  } else if (name == "stage_1_2") {
    c.trainable = {"ffn_experts"};
    c.losses = {"cross_entropy"};
    c.lr = 2e-6;
    c.weight_decay = 0.05;
    c.warmup_ratio = 0.03;
    c.schedule = "cosine";
    c.steps = 200;
  } else if (name == "stage_2_1") {
    c.trainable = {"router", "alignment", "ffn_experts"};  // phase B
    c.trainable_phase_a = {"router", "alignment"};         // experts frozen until routing settles
    c.phase_a_fraction = 0.3;
    c.losses = {"coarse", "aux"};
    c.lr = 1e-4;
    c.weight_decay = 0.05;
    c.warmup_ratio = 0.05;
    c.schedule = "cosine";
    c.steps = 500;
  } else if (name == "stage_2_2") {
    c.trainable = {"router", "ffn_experts"};
    c.losses = {"cross_entropy", "aux"};
    c.lr = 1e-5;
    c.weight_decay = 0.1;
    c.warmup_ratio = 0.05;
    c.schedule = "constant";
    c.steps = 200;
  } else {
    throw ParameterError("unknown stage '" + name + "'");
  }
  return c;
}

FreezeMask make_freeze_mask(const StageConfig& stage, bool phase_a) {
  stage.validate();
  const std::vector<std::string>& groups =
      (phase_a && stage.phase_a_fraction > 0.0) ? stage.trainable_phase_a : stage.trainable;
  FreezeMask mask;
  for (const std::string& g : groups) {
    mask.trainable[static_cast<std::size_t>(param_group_from_name(g))] = true;
  }
  return mask;
}

double lr_at(std::size_t step, const StageConfig& cfg) {
  if (step > cfg.steps) throw ParameterError("lr_at step beyond stage length");
  auto warmup = static_cast<std::size_t>(std::llround(cfg.warmup_ratio * static_cast<double>(cfg.steps)));
  if (warmup > 0 && step < warmup) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (cfg.schedule == "constant") return cfg.lr;
  if (cfg.steps <= warmup) return cfg.lr;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.steps - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void AdamW::step(const std::vector<NamedParam>& params, const FreezeMask& mask, double lr,
                 double weight_decay) {
  for (const NamedParam& p : params) {
    if (!mask.is_trainable(p.group)) continue;
    Tensor& t = *p.tensor;
    const std::vector<double>& g = t.grad();  // allocates zeros if the step never touched it
    Moments& mo = moments_[&t];
    if (mo.m.empty()) {
      mo.m.assign(t.numel(), 0.0);
      mo.v.assign(t.numel(), 0.0);
    }
    ++mo.t;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(mo.t));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(mo.t));
    for (std::size_t i = 0; i < t.numel(); ++i) {
      mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g[i];
      mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = mo.m[i] / bc1;
      double vhat = mo.v[i] / bc2;
      t.at(i) -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * t.at(i));
    }
  }
}

void DataConfig::validate() const {
  if (dataset_size < 1 || caption_classes < 1 || caption_length < 1 || visual_tokens < 1) {
    throw ParameterError("data pool counts must be positive");
  }
  if (max_seq < caption_length) throw ParameterError("max_seq cannot be below caption_length");
  if (csqa_mix < 0.0 || csqa_mix > 1.0) throw ParameterError("csqa_mix must lie in [0, 1]");
}

TrainData make_caption_data(const DataConfig& data, const ModelConfig& model, std::uint64_t seed) {
  data.validate();
  Rng code_rng(substream(seed, "data-classes"));
  std::vector<Tensor> codes;
  codes.reserve(data.caption_classes);
  for (std::size_t c = 0; c < data.caption_classes; ++c) {
    codes.push_back(Tensor::randn({data.visual_tokens, model.d_vis}, code_rng, 1.0));
  }
  Rng cap_rng(substream(seed, "data-captions"));
  std::vector<std::vector<int>> captions(data.caption_classes);
  for (std::size_t c = 0; c < data.caption_classes; ++c) {
    captions[c].resize(data.caption_length);
    // First token pinned per class so every caption is predictable from the
    // visual code alone; the rest is seeded filler.
    captions[c][0] = static_cast<int>(c % model.vocab);
    for (std::size_t j = 1; j < data.caption_length; ++j) {
      captions[c][j] = static_cast<int>(cap_rng.below(model.vocab));
    }
  }
  TrainData td;
  td.samples.resize(data.dataset_size);
  for (std::size_t i = 0; i < data.dataset_size; ++i) {
    std::size_t c = i % data.caption_classes;
    td.samples[i] = {codes[c], captions[c]};
  }
  return td;
}

std::vector<int> hash_tokenize(const std::string& text, std::size_t vocab, std::size_t max_len) {
  if (vocab < 1 || max_len < 1) throw ParameterError("tokenizer needs positive vocab and length");
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word && ids.size() < max_len) {
    ids.push_back(static_cast<int>(substream(0, "token:" + word) % vocab));
  }
  if (ids.empty()) ids.push_back(0);
  return ids;
}

TrainData make_stage22_data(const DataConfig& data, const ModelConfig& model, std::uint64_t seed) {
  data.validate();
  if (data.csqa_path.empty()) {
    throw TrainingError("stage_2_2 needs csqa_path; generate one with the gen-csqa command first");
  }
  std::ifstream in(data.csqa_path);
  if (!in) {
    throw TrainingError("stage_2_2 cannot open csqa_path '" + data.csqa_path +
                        "'; generate it with the gen-csqa command first");
  }
  std::vector<std::vector<int>> qa_tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json row = ordered_json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.contains("question") || !row.contains("answer")) {
      throw DataError("csqa line " + std::to_string(line_no) + " is not a question/answer record");
    }
    std::string text = row["question"].get<std::string>() + " " + row["answer"].get<std::string>();
    qa_tokens.push_back(hash_tokenize(text, model.vocab, data.max_seq));
  }
  if (qa_tokens.empty()) throw DataError("csqa file holds no usable records: " + data.csqa_path);

  TrainData caption = make_caption_data(data, model, seed);

  TrainData out;
  out.samples.resize(data.dataset_size);
  double acc = 0.0;
  std::size_t qi = 0, ci = 0;
  for (std::size_t i = 0; i < data.dataset_size; ++i) {
    acc += data.csqa_mix;
    if (acc >= 1.0 - 1e-12) {  // Bresenham interleave at the requested ratio
      acc -= 1.0;
      // QA records carry no visual scene, so these samples are text-only.
      out.samples[i] = {Tensor({0, model.d_vis}), qa_tokens[qi % qa_tokens.size()]};
      ++qi;
    } else {
      out.samples[i] = caption.samples[ci % caption.samples.size()];
      ++ci;
    }
  }
  return out;
}

namespace {

struct TermCheck {
  const char* name;
  double value;
};

void check_finite_term(const TermCheck& term, std::size_t step, const std::string& stage) {
  if (!std::isfinite(term.value)) {
    throw TrainingError(std::string(term.name) + " became non-finite at step " + std::to_string(step) +
                        " of " + stage);
  }
}

// Per-layer routing summary over the whole batch: argmax fractions, column
// means, and the entropy of the mean distribution.
struct LayerStats {
  std::vector<double> fractions, means;
  double entropy = 0.0;
};

LayerStats batch_layer_stats(const std::vector<const Tensor*>& probs) {
  std::size_t m = probs.front()->cols();
  LayerStats st;
  st.fractions.assign(m, 0.0);
  st.means.assign(m, 0.0);
  std::size_t tokens = 0;
  for (const Tensor* p : probs) {
    for (std::size_t t = 0; t < p->rows(); ++t) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < m; ++i) {
        if (p->at(t, i) > p->at(t, best)) best = i;
      }
      st.fractions[best] += 1.0;
      for (std::size_t i = 0; i < m; ++i) st.means[i] += p->at(t, i);
      ++tokens;
    }
  }
  for (double& v : st.fractions) v /= static_cast<double>(tokens);
  for (double& v : st.means) v /= static_cast<double>(tokens);
  for (double g : st.means) {
    if (g > 0.0) st.entropy -= g * std::log(g);
  }
  return st;
}

}  // namespace

StageReport train_stage(ToyModel& model, const StageConfig& stage, const TrainData& data,
                        std::uint64_t seed, const LossWeights& weights, std::size_t batch,
                        std::size_t log_every) {
  stage.validate();
  weights.validate();
  if (batch < 1) throw ParameterError("batch must be at least 1");
  if (log_every < 1) throw ParameterError("log_every must be at least 1");
  if (data.samples.empty()) throw ParameterError("training data pool is empty");

  bool en_ce = contains(stage.losses, "cross_entropy");
  bool en_coarse = contains(stage.losses, "coarse");
  bool en_aux = contains(stage.losses, "aux");

  StageReport rep;
  rep.stage = stage.name;
  rep.steps = stage.steps;

  std::vector<NamedParam> params = enumerate_params(model);
  std::vector<std::vector<double>> before;
  before.reserve(params.size());
  for (const NamedParam& p : params) before.push_back(p.tensor->vec());

  TeacherFeatures teachers;
  if (en_coarse) {
    teachers = make_mock_teachers(substream(seed, "teacher"), model.cfg.synergy_tokens,
                                  model.cfg.d_align_t, model.cfg.d_align_g);
  }

  AdamW opt;
  auto phase_a_steps =
      static_cast<std::size_t>(std::llround(stage.phase_a_fraction * static_cast<double>(stage.steps)));

  for (std::size_t step = 0; step < stage.steps; ++step) {
    try {
      FreezeMask mask = make_freeze_mask(stage, step < phase_a_steps);
      Tape tape;

      std::vector<NodeId> ce_parts, coarse_parts;
      std::vector<std::size_t> moe_layers;
      std::vector<std::vector<NodeId>> layer_probs;  // [moe layer][sample]

      for (std::size_t j = 0; j < batch; ++j) {
        const Sample& s = data.samples[(step * batch + j) % data.samples.size()];
        std::size_t syn = en_coarse ? model.cfg.synergy_tokens : 0;
        ForwardResult f = model_forward(tape, model, s.visual, s.text, syn);

        if (en_ce) {
          std::size_t p = f.visual_len;
          std::vector<std::size_t> rows;
          std::vector<int> targets;
          if (p >= 1) {
            for (std::size_t i = 0; i < s.text.size(); ++i) rows.push_back(p - 1 + i);
            targets = s.text;
          } else if (s.text.size() >= 2) {
            for (std::size_t i = 0; i + 1 < s.text.size(); ++i) rows.push_back(i);
            targets.assign(s.text.begin() + 1, s.text.end());
          } else {
            throw ParameterError("cross-entropy sample needs a visual prefix or two text tokens");
          }
          ce_parts.push_back(tape.cross_entropy(tape.gather_rows(f.logits, rows), targets));
        }
        if (en_coarse) {
          auto [fv, fg] = project_synergy_tape(tape, f.synergy, model.alignment);
          coarse_parts.push_back(coarse_loss_tape(tape, fv, fg, teachers));
        }
        if (!f.moe_probs.empty()) {
          if (layer_probs.empty()) {
            moe_layers = f.moe_layers;
            layer_probs.resize(f.moe_probs.size());
          }
          for (std::size_t l = 0; l < f.moe_probs.size(); ++l) {
            layer_probs[l].push_back(f.moe_probs[l]);
          }
        }
      }

      auto fold_mean = [&tape](const std::vector<NodeId>& parts) {
        NodeId acc = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) acc = tape.add(acc, parts[i]);
        return tape.scale(acc, 1.0 / static_cast<double>(parts.size()));
      };

      bool have_total = false;
      NodeId total = 0;
      double ce_v = 0.0, coarse_v = 0.0, aux_weighted_v = 0.0;
      if (en_ce) {
        NodeId ce = fold_mean(ce_parts);
        ce_v = tape.value(ce).item();
        check_finite_term({"cross_entropy", ce_v}, step, stage.name);
        total = ce;
        have_total = true;
      }
      if (en_coarse) {
        NodeId coarse = fold_mean(coarse_parts);
        coarse_v = tape.value(coarse).item();
        check_finite_term({"coarse", coarse_v}, step, stage.name);
        total = have_total ? tape.add(total, coarse) : coarse;
        have_total = true;
      }
      if (en_aux && !layer_probs.empty()) {
        std::vector<NodeId> lb;
        lb.reserve(layer_probs.size());
        for (const std::vector<NodeId>& per_layer : layer_probs) {
          NodeId cat = per_layer[0];
          for (std::size_t i = 1; i < per_layer.size(); ++i) cat = tape.concat_rows(cat, per_layer[i]);
          lb.push_back(load_balance_loss_tape(tape, cat));
        }
        NodeId aux = fold_mean(lb);  // arithmetic mean over MoE layers
        NodeId weighted = tape.scale(aux, weights.alpha);
        aux_weighted_v = tape.value(weighted).item();
        check_finite_term({"aux", aux_weighted_v}, step, stage.name);
        total = have_total ? tape.add(total, weighted) : weighted;
        have_total = true;
      }
      if (!have_total) {
        throw TrainingError("no enabled loss term applies to this model at step " + std::to_string(step) +
                            " of " + stage.name);
      }
      double total_v = tape.value(total).item();
      check_finite_term({"total", total_v}, step, stage.name);

      for (const NamedParam& p : params) {
        p.tensor->grad();
        p.tensor->zero_grad();
      }
      tape.backward(total);
      double lr = lr_at(step, stage);
      opt.step(params, mask, lr, stage.weight_decay);

      if (step % log_every == 0 || step + 1 == stage.steps) {
        rep.curve.push_back({step, total_v, ce_v, coarse_v, aux_weighted_v, lr});
        double entropy_sum = 0.0;
        for (std::size_t l = 0; l < layer_probs.size(); ++l) {
          std::vector<const Tensor*> values;
          values.reserve(layer_probs[l].size());
          for (NodeId id : layer_probs[l]) values.push_back(&tape.value(id));
          LayerStats st = batch_layer_stats(values);
          for (std::size_t e = 0; e < st.fractions.size(); ++e) {
            rep.telemetry.push_back({moe_layers[l], e, st.fractions[e], st.means[e], step});
          }
          entropy_sum += st.entropy;
        }
        rep.routing_entropy.push_back(
            layer_probs.empty() ? 0.0 : entropy_sum / static_cast<double>(layer_probs.size()));
      }
    } catch (const DimensionError& e) {
      // Tensors refuse non-finite values at construction, so a diverging
      // run surfaces here; rethrow with the training context attached.
      if (std::string(e.what()).find("non-finite") == std::string::npos) throw;
      throw TrainingError("loss became non-finite at step " + std::to_string(step) + " of " +
                          stage.name + "; lower the learning rate");
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    double sq = 0.0;
    const std::vector<double>& now = params[i].tensor->vec();
    for (std::size_t j = 0; j < now.size(); ++j) {
      double d = now[j] - before[i][j];
      sq += d * d;
    }
    rep.delta_norms[static_cast<std::size_t>(params[i].group)] += sq;
  }
  for (double& v : rep.delta_norms) v = std::sqrt(v);

  if (!rep.curve.empty()) {
    rep.initial_loss = rep.curve.front().total;
    rep.final_loss = rep.curve.back().total;
    rep.initial_ce = rep.curve.front().cross_entropy;
    rep.final_ce = rep.curve.back().cross_entropy;
    rep.initial_coarse = rep.curve.front().coarse;
    rep.final_coarse = rep.curve.back().coarse;
  }
  return rep;
}

// ---- RunConfig JSON ----

namespace {

void assign_stage_field(StageConfig& sc, const std::string& field, const ordered_json& v,
                        const std::string& key) {
  auto as_double = [&]() {
    if (!v.is_number()) throw ParameterError("config key '" + key + "' must be a number");
    return v.get<double>();
  };
  auto as_steps = [&]() {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ParameterError("config key '" + key + "' must be a nonnegative integer");
    }
    return v.get<std::size_t>();
  };
  auto as_strings = [&]() {
    if (!v.is_array()) throw ParameterError("config key '" + key + "' must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ParameterError("config key '" + key + "' must be an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  };
  if (field == "lr") sc.lr = as_double();
  else if (field == "warmup_ratio") sc.warmup_ratio = as_double();
  else if (field == "weight_decay") sc.weight_decay = as_double();
  else if (field == "phase_a_fraction") sc.phase_a_fraction = as_double();
  else if (field == "steps") sc.steps = as_steps();
  else if (field == "schedule") {
    if (!v.is_string()) throw ParameterError("config key '" + key + "' must be a string");
    sc.schedule = v.get<std::string>();
  } else if (field == "losses") sc.losses = as_strings();
  else if (field == "trainable") sc.trainable = as_strings();
  else if (field == "trainable_phase_a") sc.trainable_phase_a = as_strings();
  else throw ParameterError("unknown stage override '" + key + "'");
}

}  // namespace

StageConfig RunConfig::stage_config(const std::string& name) const {
  auto it = stage_overrides.find(name);
  if (it != stage_overrides.end()) return it->second;
  return default_stage_config(name);
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ParameterError("alpha must be nonnegative");
  if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
    throw ParameterError("noise_scale must be nonnegative");
  }
  if (batch < 1) throw ParameterError("batch must be at least 1");
  if (log_every < 1) throw ParameterError("log_every must be at least 1");
  if (grad_seeds < 1) throw ParameterError("grad_seeds must be at least 1");
  if (grad_eps < 1e-7 || grad_eps > 1e-3) throw ParameterError("grad_eps must lie in [1e-7, 1e-3]");
  if (ablate_steps < 1 || ablate_layers < 1) throw ParameterError("ablate settings must be positive");
  const std::vector<std::string>& canon = canonical_stage_names();
  std::size_t last = 0;
  for (const std::string& s : stages) {
    auto it = std::find(canon.begin(), canon.end(), s);
    if (it == canon.end()) throw ParameterError("unknown stage '" + s + "' in stages");
    auto idx = static_cast<std::size_t>(it - canon.begin()) + 1;
    if (idx <= last) throw ParameterError("stages must follow the canonical order without repeats");
    last = idx;
  }
  for (const auto& [name, sc] : stage_overrides) {
    if (sc.name != name) throw InternalError("stage override name mismatch");
    sc.validate();
  }
  for (const std::string& s : stages) stage_config(s).validate();
}

RunConfig run_config_from_json_text(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("run config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw DataError("run config must be a JSON object");
  RunConfig cfg;

  auto num = [](const ordered_json& v, const std::string& key) {
    if (!v.is_number()) throw ParameterError("config key '" + key + "' must be a number");
    return v.get<double>();
  };
  auto count = [](const ordered_json& v, const std::string& key) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ParameterError("config key '" + key + "' must be a nonnegative integer");
    }
    return v.get<std::size_t>();
  };
  auto str = [](const ordered_json& v, const std::string& key) {
    if (!v.is_string()) throw ParameterError("config key '" + key + "' must be a string");
    return v.get<std::string>();
  };
  auto boolean = [](const ordered_json& v, const std::string& key) {
    if (!v.is_boolean()) throw ParameterError("config key '" + key + "' must be a boolean");
    return v.get<bool>();
  };

  for (const auto& [key, v] : doc.items()) {
    auto dot = key.find('.');
    if (dot != std::string::npos && key.rfind("stage_", 0) == 0) {
      std::string name = key.substr(0, dot);
      if (!contains(canonical_stage_names(), name)) {
        throw ParameterError("unknown stage in config key '" + key + "'");
      }
      auto [it, inserted] = cfg.stage_overrides.try_emplace(name, default_stage_config(name));
      assign_stage_field(it->second, key.substr(dot + 1), v, key);
      continue;
    }
    if (key == "layers") cfg.model.layers = count(v, key);
    else if (key == "d_model") cfg.model.d_model = count(v, key);
    else if (key == "d_hidden") cfg.model.d_hidden = count(v, key);
    else if (key == "d_vis") cfg.model.d_vis = count(v, key);
    else if (key == "vocab") cfg.model.vocab = count(v, key);
    else if (key == "heads") cfg.model.heads = count(v, key);
    else if (key == "num_experts") cfg.model.num_experts = count(v, key);
    else if (key == "top_k") cfg.model.top_k = count(v, key);
    else if (key == "placement") cfg.model.placement = str(v, key);
    else if (key == "synergy_tokens") cfg.model.synergy_tokens = count(v, key);
    else if (key == "d_align_t") cfg.model.d_align_t = count(v, key);
    else if (key == "d_align_g") cfg.model.d_align_g = count(v, key);
    else if (key == "d_align_hidden") cfg.model.d_align_hidden = count(v, key);
    else if (key == "init_std") cfg.model.init_std = num(v, key);
    else if (key == "ln_eps") cfg.model.ln_eps = num(v, key);
    else if (key == "renormalize_weights") cfg.model.renormalize_weights = boolean(v, key);
    else if (key == "dataset_size") cfg.data.dataset_size = count(v, key);
    else if (key == "caption_classes") cfg.data.caption_classes = count(v, key);
    else if (key == "caption_length") cfg.data.caption_length = count(v, key);
    else if (key == "visual_tokens") cfg.data.visual_tokens = count(v, key);
    else if (key == "max_seq") cfg.data.max_seq = count(v, key);
    else if (key == "csqa_mix") cfg.data.csqa_mix = num(v, key);
    else if (key == "csqa_path") cfg.data.csqa_path = str(v, key);
    else if (key == "stages") {
      if (!v.is_array()) throw ParameterError("config key 'stages' must be an array");
      cfg.stages.clear();
      for (const auto& e : v) cfg.stages.push_back(str(e, key));
    } else if (key == "alpha") cfg.alpha = num(v, key);
    else if (key == "noise_scale") cfg.noise_scale = num(v, key);
    else if (key == "batch") cfg.batch = count(v, key);
    else if (key == "log_every") cfg.log_every = count(v, key);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(count(v, key));
    else if (key == "grad_seeds") cfg.grad_seeds = count(v, key);
    else if (key == "grad_eps") cfg.grad_eps = num(v, key);
    else if (key == "grad_max_coords") cfg.grad_max_coords = count(v, key);
    else if (key == "grad_corrupt_op") cfg.grad_corrupt_op = str(v, key);
    else if (key == "ablate_steps") cfg.ablate_steps = count(v, key);
    else if (key == "ablate_layers") cfg.ablate_layers = count(v, key);
    else throw ParameterError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_config_from_json_text(ss.str());
}

std::string run_config_to_json_text(const RunConfig& cfg) {
  ordered_json doc;
  doc["layers"] = cfg.model.layers;
  doc["d_model"] = cfg.model.d_model;
  doc["d_hidden"] = cfg.model.d_hidden;
  doc["d_vis"] = cfg.model.d_vis;
  doc["vocab"] = cfg.model.vocab;
  doc["heads"] = cfg.model.heads;
  doc["num_experts"] = cfg.model.num_experts;
  doc["top_k"] = cfg.model.top_k;
  doc["placement"] = cfg.model.placement;
  doc["synergy_tokens"] = cfg.model.synergy_tokens;
  doc["d_align_t"] = cfg.model.d_align_t;
  doc["d_align_g"] = cfg.model.d_align_g;
  doc["d_align_hidden"] = cfg.model.d_align_hidden;
  doc["init_std"] = cfg.model.init_std;
  doc["ln_eps"] = cfg.model.ln_eps;
  doc["renormalize_weights"] = cfg.model.renormalize_weights;
  doc["dataset_size"] = cfg.data.dataset_size;
  doc["caption_classes"] = cfg.data.caption_classes;
  doc["caption_length"] = cfg.data.caption_length;
  doc["visual_tokens"] = cfg.data.visual_tokens;
  doc["max_seq"] = cfg.data.max_seq;
  doc["csqa_mix"] = cfg.data.csqa_mix;
  doc["csqa_path"] = cfg.data.csqa_path;
  doc["stages"] = cfg.stages;
  doc["alpha"] = cfg.alpha;
  doc["noise_scale"] = cfg.noise_scale;
  doc["batch"] = cfg.batch;
  doc["log_every"] = cfg.log_every;
  doc["seed"] = cfg.seed;
  doc["grad_seeds"] = cfg.grad_seeds;
  doc["grad_eps"] = cfg.grad_eps;
  doc["grad_max_coords"] = cfg.grad_max_coords;
  doc["grad_corrupt_op"] = cfg.grad_corrupt_op;
  doc["ablate_steps"] = cfg.ablate_steps;
  doc["ablate_layers"] = cfg.ablate_layers;
  for (const std::string& name : canonical_stage_names()) {
    StageConfig sc = cfg.stage_config(name);
    doc[name + ".trainable"] = sc.trainable;
    doc[name + ".trainable_phase_a"] = sc.trainable_phase_a;
    doc[name + ".phase_a_fraction"] = sc.phase_a_fraction;
    doc[name + ".losses"] = sc.losses;
    doc[name + ".lr"] = sc.lr;
    doc[name + ".warmup_ratio"] = sc.warmup_ratio;
    doc[name + ".schedule"] = sc.schedule;
    doc[name + ".weight_decay"] = sc.weight_decay;
    doc[name + ".steps"] = sc.steps;
  }
  return doc.dump(2) + "\n";
}

// ---- run directory orchestration ----

namespace {

ordered_json stage_report_to_json(const StageReport& rep) {
  ordered_json j;
  j["stage"] = rep.stage;
  j["steps"] = rep.steps;
  j["initial_loss"] = rep.initial_loss;
  j["final_loss"] = rep.final_loss;
  j["initial_ce"] = rep.initial_ce;
  j["final_ce"] = rep.final_ce;
  j["initial_coarse"] = rep.initial_coarse;
  j["final_coarse"] = rep.final_coarse;
  ordered_json deltas;
  for (std::size_t g = 0; g < kNumParamGroups; ++g) {
    deltas[param_group_name(static_cast<ParamGroup>(g))] = rep.delta_norms[g];
  }
  j["delta_norms"] = deltas;
  j["routing_entropy"] = rep.routing_entropy;
  ordered_json curve = ordered_json::array();
  for (const CurveRow& r : rep.curve) {
    curve.push_back({{"step", r.step},
                     {"total", r.total},
                     {"cross_entropy", r.cross_entropy},
                     {"coarse", r.coarse},
                     {"aux", r.aux},
                     {"lr", r.lr}});
  }
  j["curve"] = curve;
  ordered_json tele = ordered_json::array();
  for (const TelemetryRow& r : rep.telemetry) {
    tele.push_back({{"layer", r.layer},
                    {"expert", r.expert},
                    {"token_fraction", r.token_fraction},
                    {"mean_prob", r.mean_prob},
                    {"step", r.step}});
  }
  j["telemetry"] = tele;
  return j;
}

StageReport stage_report_from_json(const ordered_json& j) {
  StageReport rep;
  rep.stage = j.at("stage").get<std::string>();
  rep.steps = j.at("steps").get<std::size_t>();
  rep.initial_loss = j.at("initial_loss").get<double>();
  rep.final_loss = j.at("final_loss").get<double>();
  rep.initial_ce = j.at("initial_ce").get<double>();
  rep.final_ce = j.at("final_ce").get<double>();
  rep.initial_coarse = j.at("initial_coarse").get<double>();
  rep.final_coarse = j.at("final_coarse").get<double>();
  for (std::size_t g = 0; g < kNumParamGroups; ++g) {
    rep.delta_norms[g] = j.at("delta_norms").at(param_group_name(static_cast<ParamGroup>(g))).get<double>();
  }
  rep.routing_entropy = j.at("routing_entropy").get<std::vector<double>>();
  for (const auto& r : j.at("curve")) {
    rep.curve.push_back({r.at("step").get<std::size_t>(), r.at("total").get<double>(),
                         r.at("cross_entropy").get<double>(), r.at("coarse").get<double>(),
                         r.at("aux").get<double>(), r.at("lr").get<double>()});
  }
  for (const auto& r : j.at("telemetry")) {
    rep.telemetry.push_back({r.at("layer").get<std::size_t>(), r.at("expert").get<std::size_t>(),
                             r.at("token_fraction").get<double>(), r.at("mean_prob").get<double>(),
                             r.at("step").get<std::size_t>()});
  }
  return rep;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

void write_run_artifacts(const std::string& out_dir, const RunConfig& cfg,
                         const std::vector<StageReport>& reports) {
  std::ostringstream curve;
  curve << "step,stage,total,cross_entropy,coarse,aux,lr\n";
  std::ostringstream routing;
  routing << "layer,expert,token_fraction,mean_prob,step\n";
  std::size_t offset = 0;
  for (const StageReport& rep : reports) {
    for (const CurveRow& r : rep.curve) {
      curve << (offset + r.step) << ',' << rep.stage << ',' << fmt17(r.total) << ','
            << fmt17(r.cross_entropy) << ',' << fmt17(r.coarse) << ',' << fmt17(r.aux) << ','
            << fmt17(r.lr) << '\n';
    }
    for (const TelemetryRow& r : rep.telemetry) {
      routing << r.layer << ',' << r.expert << ',' << fmt17(r.token_fraction) << ','
              << fmt17(r.mean_prob) << ',' << (offset + r.step) << '\n';
    }
    offset += rep.steps;
  }
  write_text_file(out_dir + "/curve.csv", curve.str());
  write_text_file(out_dir + "/routing.csv", routing.str());

  ordered_json report;
  report["config"] = ordered_json::parse(run_config_to_json_text(cfg));
  report["seed"] = cfg.seed;
  ordered_json stages = ordered_json::array();
  for (const StageReport& rep : reports) {
    ordered_json s = stage_report_to_json(rep);
    s.erase("curve");      // full detail lives in reports/<stage>.json and the CSVs
    s.erase("telemetry");
    stages.push_back(s);
  }
  report["stages"] = stages;
  write_text_file(out_dir + "/report.json", report.dump(2) + "\n");
}

}  // namespace

void run_training(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (contains(cfg.stages, "stage_2_2")) {
    if (cfg.data.csqa_path.empty() || !std::filesystem::exists(cfg.data.csqa_path)) {
      throw TrainingError("stage_2_2 needs an existing CSQA file at csqa_path; generate one with the "
                          "gen-csqa command first");
    }
  }
  std::filesystem::create_directories(out_dir + "/checkpoints");
  std::filesystem::create_directories(out_dir + "/reports");
  write_text_file(out_dir + "/config.json", run_config_to_json_text(cfg));

  ToyModel model = build_toy_model(cfg.model, cfg.seed);
  std::vector<StageReport> reports;
  for (const std::string& name : cfg.stages) {
    StageConfig sc = cfg.stage_config(name);
    std::string ckpt = out_dir + "/checkpoints/" + name + ".ckpt";
    std::string rpath = out_dir + "/reports/" + name + ".json";
    if (std::filesystem::exists(ckpt) && std::filesystem::exists(rpath)) {
      load_model(ckpt, model);
      std::ifstream in(rpath);
      ordered_json j = ordered_json::parse(in, nullptr, false);
      if (j.is_discarded()) throw DataError("stage report is not valid JSON: " + rpath);
      reports.push_back(stage_report_from_json(j));
    } else {
      if (name.rfind("stage_2", 0) == 0 && !model.upcycled) {
        upcycle_model(model, cfg.noise_scale, cfg.seed);
      }
      TrainData data = (name == "stage_2_2") ? make_stage22_data(cfg.data, cfg.model, cfg.seed)
                                             : make_caption_data(cfg.data, cfg.model, cfg.seed);
      LossWeights weights{cfg.alpha};
      StageReport rep = train_stage(model, sc, data, cfg.seed, weights, cfg.batch, cfg.log_every);
      save_model(ckpt, model);
      write_text_file(rpath, stage_report_to_json(rep).dump(2) + "\n");
      reports.push_back(std::move(rep));
    }
    write_run_artifacts(out_dir, cfg, reports);
  }
  if (cfg.stages.empty()) write_run_artifacts(out_dir, cfg, reports);
}

}  // namespace polyv
