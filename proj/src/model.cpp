#include "polyv/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "polyv/error.hpp"

namespace polyv {

void ModelConfig::validate() const {
  if (layers < 1) throw ParameterError("model needs at least one layer");
  if (d_model < 1 || d_hidden < 1 || d_vis < 1) throw ParameterError("model dims must be positive");
  if (vocab < 2) throw ParameterError("vocabulary needs at least two entries");
  if (heads < 1 || d_model % heads != 0) {
    throw ParameterError("d_model " + std::to_string(d_model) + " must divide evenly into " +
                         std::to_string(heads) + " heads");
  }
  if (num_experts < 1 || top_k < 1 || top_k > num_experts) {
    throw ParameterError("need 1 <= top_k <= num_experts");
  }
  if (synergy_tokens < 1 || d_align_t < 1 || d_align_g < 1 || d_align_hidden < 1) {
    throw ParameterError("synergy/alignment dims must be positive");
  }
  if (!(init_std > 0.0) || !(ln_eps > 0.0)) throw ParameterError("init_std and ln_eps must be positive");
  build_schedule(layers, placement);  // throws on an invalid mode string
}

LayerSchedule ModelConfig::schedule() const { return build_schedule(layers, placement); }

const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kProjector: return "projector";
    case ParamGroup::kAttention: return "attention";
    case ParamGroup::kLayerNorm: return "layernorm";
    case ParamGroup::kEmbedding: return "embedding";
    case ParamGroup::kHead: return "head";
    case ParamGroup::kFfnExperts: return "ffn_experts";
    case ParamGroup::kRouter: return "router";
    case ParamGroup::kAlignment: return "alignment";
  }
  return "?";
}

ParamGroup param_group_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kNumParamGroups; ++i) {
    auto g = static_cast<ParamGroup>(i);
    if (name == param_group_name(g)) return g;
  }
  throw ParameterError("unknown parameter group '" + name + "'");
}

ToyModel build_toy_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ToyModel m;
  m.cfg = cfg;
  m.schedule = cfg.schedule();
  Rng rng(substream(seed, "model"));
  double s = cfg.init_std;
  m.visual_projector = Tensor::randn({cfg.d_vis, cfg.d_model}, rng, s);
  m.token_embedding = Tensor::randn({cfg.vocab, cfg.d_model}, rng, s);
  m.blocks.resize(cfg.layers);
  for (Block& b : m.blocks) {
    b.attn.w_query = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
    b.attn.w_key = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
    b.attn.w_value = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
    b.attn.w_out = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
    b.ln1_gain = Tensor::full({cfg.d_model}, 1.0);
    b.ln1_bias = Tensor({cfg.d_model});
    b.ln2_gain = Tensor::full({cfg.d_model}, 1.0);
    b.ln2_bias = Tensor({cfg.d_model});
    b.dense_ffn = ExpertFfn::random(cfg.d_model, cfg.d_hidden, rng, s);
  }
  m.final_ln_gain = Tensor::full({cfg.d_model}, 1.0);
  m.final_ln_bias = Tensor({cfg.d_model});
  m.head = Tensor::randn({cfg.d_model, cfg.vocab}, rng, s);
  m.synergy_embeddings = Tensor::randn({cfg.synergy_tokens, cfg.d_model}, rng, s);
  m.alignment.temporal =
      TwoLayerMlp::random(cfg.d_model, cfg.d_align_hidden, cfg.d_align_t, rng, s);
  m.alignment.spatial = TwoLayerMlp::random(cfg.d_model, cfg.d_align_hidden, cfg.d_align_g, rng, s);
  return m;
}

void upcycle_model(ToyModel& model, double noise_scale, std::uint64_t seed) {
  if (model.upcycled) throw TrainingError("model is already upcycled");
  for (std::size_t li : model.schedule.moe_layer_indices) {
    Block& b = model.blocks[li];
    b.moe = upcycle_from_dense(b.dense_ffn, model.cfg.num_experts, noise_scale,
                               substream(seed, "upcycle-layer:" + std::to_string(li)),
                               model.cfg.top_k);
    b.moe->renormalize_weights = model.cfg.renormalize_weights;
    b.dense_ffn = ExpertFfn{};  // dense weights are owned by the experts now
  }
  model.upcycled = true;
}

std::vector<NamedParam> enumerate_params(ToyModel& m) {
  std::vector<NamedParam> out;
  auto add = [&out](std::string name, ParamGroup g, Tensor& t) {
    out.push_back({std::move(name), g, &t});
  };
  add("visual_projector", ParamGroup::kProjector, m.visual_projector);
  add("token_embedding", ParamGroup::kEmbedding, m.token_embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    Block& b = m.blocks[i];
    std::string p = "block" + std::to_string(i) + ".";
    add(p + "attn.w_query", ParamGroup::kAttention, b.attn.w_query);
    add(p + "attn.w_key", ParamGroup::kAttention, b.attn.w_key);
    add(p + "attn.w_value", ParamGroup::kAttention, b.attn.w_value);
    add(p + "attn.w_out", ParamGroup::kAttention, b.attn.w_out);
    add(p + "ln1.gain", ParamGroup::kLayerNorm, b.ln1_gain);
    add(p + "ln1.bias", ParamGroup::kLayerNorm, b.ln1_bias);
    add(p + "ln2.gain", ParamGroup::kLayerNorm, b.ln2_gain);
    add(p + "ln2.bias", ParamGroup::kLayerNorm, b.ln2_bias);
    if (b.is_moe()) {
      add(p + "moe.router", ParamGroup::kRouter, b.moe->router.w_router);
      for (std::size_t e = 0; e < b.moe->experts.size(); ++e) {
        std::string q = p + "moe.expert" + std::to_string(e) + ".";
        add(q + "w_gate", ParamGroup::kFfnExperts, b.moe->experts[e].w_gate);
        add(q + "w_up", ParamGroup::kFfnExperts, b.moe->experts[e].w_up);
        add(q + "w_down", ParamGroup::kFfnExperts, b.moe->experts[e].w_down);
      }
    } else {
      add(p + "ffn.w_gate", ParamGroup::kFfnExperts, b.dense_ffn.w_gate);
      add(p + "ffn.w_up", ParamGroup::kFfnExperts, b.dense_ffn.w_up);
      add(p + "ffn.w_down", ParamGroup::kFfnExperts, b.dense_ffn.w_down);
    }
  }
  add("final_ln.gain", ParamGroup::kLayerNorm, m.final_ln_gain);
  add("final_ln.bias", ParamGroup::kLayerNorm, m.final_ln_bias);
  add("head", ParamGroup::kHead, m.head);
  add("synergy_embeddings", ParamGroup::kAlignment, m.synergy_embeddings);
  add("alignment.temporal.w1", ParamGroup::kAlignment, m.alignment.temporal.w1);
  add("alignment.temporal.w2", ParamGroup::kAlignment, m.alignment.temporal.w2);
  add("alignment.spatial.w1", ParamGroup::kAlignment, m.alignment.spatial.w1);
  add("alignment.spatial.w2", ParamGroup::kAlignment, m.alignment.spatial.w2);
  return out;
}

namespace {

// Additive causal mask: 0 on and below the diagonal, -1e30 above, which
// softmax turns into exact zeros without a dedicated primitive.
Tensor causal_mask(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = r + 1; c < n; ++c) m.at(r, c) = -1e30;
  }
  return m;
}

NodeId attention_tape(Tape& tape, NodeId x, Block& b, std::size_t heads, NodeId mask) {
  NodeId q = tape.matmul(x, tape.param(b.attn.w_query));
  NodeId k = tape.matmul(x, tape.param(b.attn.w_key));
  NodeId v = tape.matmul(x, tape.param(b.attn.w_value));
  std::size_t d_model = tape.value(q).cols();
  std::size_t dh = d_model / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  NodeId merged = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    NodeId qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    NodeId kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    NodeId vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    NodeId scores = tape.add(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt), mask);
    NodeId oh = tape.matmul(tape.softmax(scores, 1), vh);
    merged = (h == 0) ? oh : tape.concat_cols(merged, oh);
  }
  return tape.matmul(merged, tape.param(b.attn.w_out));
}

}  // namespace

ForwardResult model_forward(Tape& tape, ToyModel& model, const Tensor& visual,
                            const std::vector<int>& text_ids, std::size_t synergy_count) {
  const ModelConfig& cfg = model.cfg;
  std::size_t p = 0;
  if (visual.numel() > 0) {
    if (visual.ndim() != 2 || visual.cols() != cfg.d_vis) {
      throw DimensionError("visual input must be P x " + std::to_string(cfg.d_vis) + ", got " +
                           visual.shape_str());
    }
    p = visual.rows();
  }
  for (int id : text_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
      throw ParameterError("text id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(cfg.vocab));
    }
  }
  if (synergy_count > cfg.synergy_tokens) {
    throw ParameterError("synergy_count " + std::to_string(synergy_count) + " exceeds the " +
                         std::to_string(cfg.synergy_tokens) + " learned embeddings");
  }
  if (p + text_ids.size() + synergy_count == 0) {
    throw ParameterError("forward needs at least one token");
  }
  if (model.blocks.size() != model.schedule.total_layers) {
    throw InternalError("block count diverged from the layer schedule");
  }

  ForwardResult res;
  res.visual_len = p;
  res.prefix_len = p + text_ids.size();

  // X_0: visual projection rows, then text embedding rows, then synergy rows.
  NodeId x = 0;
  bool have = false;
  if (p > 0) {
    x = tape.matmul(tape.constant(visual), tape.param(model.visual_projector));
    have = true;
  }
  if (!text_ids.empty()) {
    std::vector<std::size_t> rows(text_ids.begin(), text_ids.end());
    NodeId t = tape.gather_rows(tape.param(model.token_embedding), rows);
    x = have ? tape.concat_rows(x, t) : t;
    have = true;
  }
  if (synergy_count > 0) {
    NodeId emb = tape.param(model.synergy_embeddings);
    if (synergy_count < cfg.synergy_tokens) emb = tape.slice_rows(emb, 0, synergy_count);
    x = have ? tape.concat_rows(x, emb) : emb;
    res.has_synergy = true;
    res.synergy_mask.resize(synergy_count);
    for (std::size_t i = 0; i < synergy_count; ++i) res.synergy_mask[i] = res.prefix_len + i;
  }

  std::size_t n = res.prefix_len + synergy_count;
  NodeId mask = tape.constant(causal_mask(n));
  for (std::size_t li = 0; li < model.blocks.size(); ++li) {
    Block& b = model.blocks[li];
    // Before upcycling every block is dense regardless of the schedule; the
    // schedule binds only once the conversion has happened.
    if (b.is_moe() != (model.upcycled && model.schedule.is_moe(li))) {
      throw InternalError("MoE placement diverged from the schedule at layer " + std::to_string(li));
    }
    NodeId ln1 = tape.layer_norm(x, tape.param(b.ln1_gain), tape.param(b.ln1_bias), cfg.ln_eps);
    x = tape.add(attention_tape(tape, ln1, b, cfg.heads, mask), x);
    NodeId ln2 = tape.layer_norm(x, tape.param(b.ln2_gain), tape.param(b.ln2_bias), cfg.ln_eps);
    NodeId y;
    if (b.is_moe()) {
      MoeTapeResult r = moe_forward_tape(tape, ln2, *b.moe);
      y = r.y;
      res.moe_probs.push_back(r.probs);
      res.moe_layers.push_back(li);
      res.records.push_back(std::move(r.record));
    } else {
      y = expert_forward_tape(tape, ln2, b.dense_ffn);
    }
    x = tape.add(y, x);
  }

  NodeId final_ln =
      tape.layer_norm(x, tape.param(model.final_ln_gain), tape.param(model.final_ln_bias), cfg.ln_eps);
  res.logits = tape.matmul(final_ln, tape.param(model.head));
  if (res.has_synergy) res.synergy = tape.gather_rows(final_ln, res.synergy_mask);
  return res;
}

void save_model(const std::string& path, ToyModel& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  std::vector<NamedParam> params = enumerate_params(model);
  out << "polyv-checkpoint upcycled=" << (model.upcycled ? 1 : 0) << " params=" << params.size() << "\n";
  for (const NamedParam& p : params) {
    out << p.name << "\n";
    write_tensor_text(out, *p.tensor);
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

void load_model(const std::string& path, ToyModel& model) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string tag;
  in >> tag;
  std::string up_field, count_field;
  in >> up_field >> count_field;
  if (tag != "polyv-checkpoint" || up_field.rfind("upcycled=", 0) != 0 ||
      count_field.rfind("params=", 0) != 0) {
    throw DataError("not a model checkpoint: " + path);
  }
  bool upcycled = up_field.substr(9) == "1";
  std::size_t count = std::stoul(count_field.substr(7));
  in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  if (upcycled && !model.upcycled) upcycle_model(model, 0.0, 0);
  if (!upcycled && model.upcycled) throw DataError("dense checkpoint cannot load into an upcycled model");

  std::vector<NamedParam> params = enumerate_params(model);
  std::unordered_map<std::string, Tensor*> by_name;
  for (const NamedParam& p : params) by_name[p.name] = p.tensor;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    if (!std::getline(in, name)) throw DataError("checkpoint truncated at parameter " + std::to_string(i));
    Tensor t = read_tensor_text(in);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint names unknown parameter '" + name + "'");
    if (!t.same_shape(*it->second)) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + t.shape_str() + ", expected " +
                      it->second->shape_str());
    }
    *it->second = std::move(t);
  }
}

}  // namespace polyv
