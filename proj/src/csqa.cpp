#include "polyv/csqa.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "polyv/error.hpp"

namespace polyv {

namespace {

using ordered_json = nlohmann::ordered_json;

const char kSep = '\x1f';

std::string triple_key(const std::string& s, const std::string& p, const std::string& o) {
  return s + kSep + p + kSep + o;
}

std::string pair_key(const std::string& s, const std::string& o) { return s + kSep + o; }

}  // namespace

void SceneGraph::validate() const {
  if (view_tag != "image" && view_tag != "video" && view_tag != "3d") {
    throw DataError("scene graph view_tag must be image, video, or 3d, got '" + view_tag + "'");
  }
  std::set<std::string> ids;
  for (const SgObject& o : objects) {
    if (o.id.empty()) throw DataError("scene graph object with empty id");
    if (!ids.insert(o.id).second) throw DataError("duplicate object id: " + o.id);
  }
  for (const SgRelation& r : relations) {
    if (!ids.count(r.subject_id)) {
      throw DataError("relation endpoint references unknown id: " + r.subject_id);
    }
    if (!ids.count(r.object_id)) {
      throw DataError("relation endpoint references unknown id: " + r.object_id);
    }
    if (r.has_span) {
      if (view_tag != "video") throw DataError("frame spans are only valid on video graphs");
      if (r.frame_span[0] < 0 || r.frame_span[1] < r.frame_span[0]) {
        throw DataError("frame span must be an ordered nonnegative pair");
      }
    }
  }
}

const SgObject* SceneGraph::find(const std::string& id) const {
  for (const SgObject& o : objects) {
    if (o.id == id) return &o;
  }
  return nullptr;
}

void PairedSceneGraph::validate() const {
  if (pair_kind != "image_video" && pair_kind != "image_3d") {
    throw DataError("pair_kind must be image_video or image_3d, got '" + pair_kind + "'");
  }
  image_sg.validate();
  other_sg.validate();
  if (image_sg.view_tag != "image") throw DataError("image_sg must carry view_tag image");
  std::string want = pair_kind == "image_video" ? "video" : "3d";
  if (other_sg.view_tag != want) {
    throw DataError("other_sg view_tag '" + other_sg.view_tag + "' does not match " + pair_kind);
  }
  std::set<std::string> seen_targets;
  for (const auto& [img_id, oth_id] : links) {
    if (!image_sg.find(img_id)) throw DataError("dangling link from unknown image id: " + img_id);
    if (!other_sg.find(oth_id)) throw DataError("dangling link to unknown id: " + oth_id);
    if (!seen_targets.insert(oth_id).second) {
      throw DataError("link map not injective at id: " + oth_id);
    }
  }
}

// ---- JSON round trip ----

namespace {

SceneGraph scene_graph_from_json(const ordered_json& j, const std::string& which) {
  if (!j.is_object()) throw DataError(which + " must be a JSON object");
  SceneGraph sg;
  sg.view_tag = j.value("view_tag", std::string());
  if (!j.contains("objects") || !j["objects"].is_array()) {
    throw DataError(which + " needs an objects array");
  }
  for (const auto& o : j["objects"]) {
    SgObject obj;
    obj.id = o.value("id", std::string());
    obj.label = o.value("label", std::string());
    if (o.contains("attributes")) {
      for (const auto& a : o["attributes"]) obj.attributes.push_back(a.get<std::string>());
    }
    sg.objects.push_back(std::move(obj));
  }
  if (j.contains("relations")) {
    if (!j["relations"].is_array()) throw DataError(which + " relations must be an array");
    for (const auto& r : j["relations"]) {
      SgRelation rel;
      rel.subject_id = r.value("subject_id", std::string());
      rel.predicate = r.value("predicate", std::string());
      rel.object_id = r.value("object_id", std::string());
      if (r.contains("frame_span")) {
        const auto& sp = r["frame_span"];
        if (!sp.is_array() || sp.size() != 2) {
          throw DataError(which + " frame_span must be a two-element array");
        }
        rel.has_span = true;
        rel.frame_span = {sp[0].get<long>(), sp[1].get<long>()};
      }
      sg.relations.push_back(std::move(rel));
    }
  }
  return sg;
}

ordered_json scene_graph_to_json(const SceneGraph& sg) {
  ordered_json j;
  j["view_tag"] = sg.view_tag;
  ordered_json objs = ordered_json::array();
  for (const SgObject& o : sg.objects) {
    objs.push_back({{"id", o.id}, {"label", o.label}, {"attributes", o.attributes}});
  }
  j["objects"] = objs;
  ordered_json rels = ordered_json::array();
  for (const SgRelation& r : sg.relations) {
    ordered_json rel = {{"subject_id", r.subject_id}, {"predicate", r.predicate},
                        {"object_id", r.object_id}};
    if (r.has_span) rel["frame_span"] = {r.frame_span[0], r.frame_span[1]};
    rels.push_back(rel);
  }
  j["relations"] = rels;
  return j;
}

}  // namespace

PairedSceneGraph paired_graph_from_json_text(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("scene-graph pair is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw DataError("scene-graph pair must be a JSON object");
  for (const char* key : {"image_sg", "other_sg", "links", "pair_kind"}) {
    if (!doc.contains(key)) throw DataError(std::string("scene-graph pair missing key '") + key + "'");
  }
  PairedSceneGraph pair;
  pair.pair_kind = doc["pair_kind"].get<std::string>();
  pair.image_sg = scene_graph_from_json(doc["image_sg"], "image_sg");
  pair.other_sg = scene_graph_from_json(doc["other_sg"], "other_sg");
  if (!doc["links"].is_object()) throw DataError("links must be a JSON object");
  for (const auto& [k, v] : doc["links"].items()) pair.links[k] = v.get<std::string>();
  pair.validate();
  return pair;
}

PairedSceneGraph load_paired_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene-graph pair file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return paired_graph_from_json_text(ss.str());
}

std::string paired_graph_to_json_text(const PairedSceneGraph& pair) {
  ordered_json doc;
  doc["pair_kind"] = pair.pair_kind;
  doc["image_sg"] = scene_graph_to_json(pair.image_sg);
  doc["other_sg"] = scene_graph_to_json(pair.other_sg);
  ordered_json links;
  for (const auto& [k, v] : pair.links) links[k] = v;
  doc["links"] = links;
  return doc.dump(2) + "\n";
}

// ---- structural diff ----

GraphDiff diff_graphs(const PairedSceneGraph& pair) {
  pair.validate();
  GraphDiff d;
  std::set<std::string> linked_other;
  for (const auto& [img_id, oth_id] : pair.links) linked_other.insert(oth_id);
  for (const SgObject& o : pair.image_sg.objects) {
    if (!pair.links.count(o.id)) d.unmatched_image_objects.push_back(o.id);
  }
  for (const SgObject& o : pair.other_sg.objects) {
    if (!linked_other.count(o.id)) d.unmatched_other_objects.push_back(o.id);
  }

  std::map<std::string, std::string> inv;
  for (const auto& [img_id, oth_id] : pair.links) inv[oth_id] = img_id;

  // Other-side relations translated into image ids; anything touching an
  // unlinked object has no possible counterpart and is new by construction.
  struct Translated {
    SgRelation rel;      // original other-id relation
    std::string s, o;    // image-id endpoints
  };
  std::vector<Translated> translated;
  for (const SgRelation& r : pair.other_sg.relations) {
    auto is = inv.find(r.subject_id);
    auto io = inv.find(r.object_id);
    if (is != inv.end() && io != inv.end()) {
      translated.push_back({r, is->second, io->second});
    } else {
      d.new_relations.push_back(r);
    }
  }

  std::set<std::string> img_triples, oth_triples;
  for (const SgRelation& r : pair.image_sg.relations) {
    img_triples.insert(triple_key(r.subject_id, r.predicate, r.object_id));
  }
  for (const Translated& t : translated) {
    oth_triples.insert(triple_key(t.s, t.rel.predicate, t.o));
  }

  // (subject, object) pairs holding at least one non-persistent predicate,
  // per side. A pair present on both sides means the predicate evolved;
  // one-sided pairs are plain removals / additions.
  std::set<std::string> so_img_left, so_oth_left;
  for (const SgRelation& r : pair.image_sg.relations) {
    if (!oth_triples.count(triple_key(r.subject_id, r.predicate, r.object_id))) {
      so_img_left.insert(pair_key(r.subject_id, r.object_id));
    }
  }
  for (const Translated& t : translated) {
    if (!img_triples.count(triple_key(t.s, t.rel.predicate, t.o))) {
      so_oth_left.insert(pair_key(t.s, t.o));
    }
  }

  for (const SgRelation& r : pair.image_sg.relations) {
    std::string k3 = triple_key(r.subject_id, r.predicate, r.object_id);
    std::string k2 = pair_key(r.subject_id, r.object_id);
    if (oth_triples.count(k3)) {
      d.persistent_relations.push_back(r);
    } else if (so_oth_left.count(k2)) {
      for (const Translated& t : translated) {
        if (t.s == r.subject_id && t.o == r.object_id &&
            !img_triples.count(triple_key(t.s, t.rel.predicate, t.o))) {
          d.changed_relations.push_back({r, t.rel});
        }
      }
    } else {
      d.removed_relations.push_back(r);
    }
  }
  for (const Translated& t : translated) {
    std::string k3 = triple_key(t.s, t.rel.predicate, t.o);
    if (!img_triples.count(k3) && !so_img_left.count(pair_key(t.s, t.o))) {
      d.new_relations.push_back(t.rel);
    }
  }
  return d;
}

// ---- templates ----

namespace {

struct Form {
  const char* q;
  const char* a;
};

const Form kAppearance[3] = {
    {"Is there a {label} visible in the {view} that was not in the image?",
     "Yes, a {label} appears in the {view}."},
    {"Does a {label} show up only in the {view}?", "Yes, the {label} is present only in the {view}."},
    {"Can a {label} be seen in the {view} but not in the image?", "Yes, the {label} shows up there."},
};

const Form kDisappearance[3] = {
    {"Is the {label} from the image still present in the {view}?",
     "No, the {label} is no longer visible in the {view}."},
    {"Does the {label} remain visible in the {view}?", "No, the {label} disappears from view."},
    {"Can the {label} still be found in the {view}?", "No, the {label} is gone in the {view}."},
};

const Form kNewObject[3] = {
    {"Does any new object appear in the {view} that is not in the image?",
     "Yes, another {list} appear in {phase}."},
    {"Are there objects in the {view} missing from the image?", "Yes, the {view} adds {plain}."},
    {"Does the {view} introduce any objects absent from the image?", "Yes, it introduces {plain}."},
};

const Form kStateChange[3] = {
    {"Does the {label} look the same in both views?",
     "No, the {label} changes from {before} to {after}."},
    {"Do the attributes of the {label} stay the same across views?", "No, the {label} turns {after}."},
    {"Is the {label} unchanged between the image and the {view}?",
     "No, its state shifts from {before} to {after}."},
};

const Form kMotion[3] = {
    {"Does the {label} keep doing the same thing across the {view}?",
     "No, the activity of the {label} changes over time."},
    {"Is the motion of the {label} continuous across frames?",
     "No, the {label} changes what it is doing."},
    {"Does the {label} continue the same action throughout?",
     "No, its action changes during the {view}."},
};

const Form kPersistenceYes[3] = {
    {"Is the {s} still {p} the {o} in the {view}?", "Yes, the {s} is still {p} the {o}."},
    {"Does the relation {s} {p} {o} hold in both views?", "Yes, that relation persists."},
    {"Does the {s} keep {p} the {o} across views?", "Yes, it continues."},
};

const Form kPersistenceNo[3] = {
    {"Is the {s} still {p} the {o} in the {view}?", "No, the {s} is no longer {p} the {o}."},
    {"Does the relation {s} {p} {o} hold in both views?", "No, that relation does not persist."},
    {"Does the {s} keep {p} the {o} across views?", "No, it stops."},
};

const Form kEvolution[3] = {
    {"Does the interaction between the {s} and the {o} change across views?",
     "Yes, it changes from {p1} to {p2}."},
    {"Is the {s} doing the same thing to the {o} in the {view}?",
     "No, the {s} goes from {p1} the {o} to {p2} it."},
    {"Does the relation between the {s} and the {o} evolve?", "Yes, {p1} becomes {p2}."},
};

const Form kEmergence[3] = {
    {"Does a new relation form between the {s} and the {o} in the {view}?",
     "Yes, the {s} starts {p} the {o}."},
    {"Is the {s} {p} the {o} at any point in the {view}?",
     "Yes, this interaction emerges in the {view}."},
    {"Does the {view} show the {s} {p} the {o}?", "Yes, that relation appears only in the {view}."},
};

std::string fill(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    std::string tag = "{" + key + "}";
    std::size_t at = 0;
    while ((at = text.find(tag, at)) != std::string::npos) {
      text.replace(at, tag.size(), value);
      at += value.size();
    }
  }
  return text;
}

std::string view_word(const PairedSceneGraph& pair) {
  return pair.pair_kind == "image_video" ? "video" : "3D scene";
}

std::string phase_word(const PairedSceneGraph& pair) {
  return pair.pair_kind == "image_video" ? "the later frames" : "the full scene";
}

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

// Every word the template bank itself can emit; content slots are filled
// from scene-graph vocabulary, so answer words outside this set must be
// grounded in the graphs.
const std::set<std::string>& template_lexicon() {
  static const std::set<std::string> lex = [] {
    std::set<std::string> s;
    auto add_bank = [&s](const Form* bank) {
      for (std::size_t i = 0; i < 3; ++i) {
        for (const std::string& text : {std::string(bank[i].q), std::string(bank[i].a)}) {
          bool in_tag = false;
          std::string cur;
          for (char c : text) {
            if (c == '{') in_tag = true;
            else if (c == '}') in_tag = false;
            else if (!in_tag) cur.push_back(c);
          }
          for (const std::string& w : tokenize_words(cur)) s.insert(w);
        }
      }
    };
    add_bank(kAppearance);
    add_bank(kDisappearance);
    add_bank(kNewObject);
    add_bank(kStateChange);
    add_bank(kMotion);
    add_bank(kPersistenceYes);
    add_bank(kPersistenceNo);
    add_bank(kEvolution);
    add_bank(kEmergence);
    // Words injected through placeholders rather than written in a bank:
    // view/phase phrasing and the list-joining furniture.
    for (const char* phrase : {"video", "3D scene", "the later frames", "the full scene", "image",
                               "and", "a", "an"}) {
      for (const std::string& w : tokenize_words(phrase)) s.insert(w);
    }
    return s;
  }();
  return lex;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Surface form chosen by a keyed hash so wording is stable per (seed, item)
// and independent of generation order.
std::size_t pick_form(std::uint64_t troot, const std::string& category, const std::string& key,
                      std::size_t forms) {
  return static_cast<std::size_t>(substream(troot, category + "|" + key) % forms);
}

QAPair make_qa(const Form& form, const std::map<std::string, std::string>& vars,
               const std::string& level, const std::string& category,
               std::vector<std::string> provenance) {
  QAPair qa;
  qa.question = fill(form.q, vars);
  qa.answer = fill(form.a, vars);
  qa.level = level;
  qa.category = category;
  qa.provenance = std::move(provenance);
  return qa;
}

}  // namespace

std::vector<QAPair> gen_object_qa(const PairedSceneGraph& pair, std::uint64_t seed) {
  GraphDiff d = diff_graphs(pair);
  std::uint64_t troot = substream(seed, "templates");
  std::string view = view_word(pair);
  std::vector<QAPair> out;

  for (const std::string& id : d.unmatched_other_objects) {
    const SgObject* obj = pair.other_sg.find(id);
    std::size_t f = pick_form(troot, "appearance", id, 3);
    out.push_back(make_qa(kAppearance[f], {{"label", obj->label}, {"view", view}}, "object",
                          "appearance", {id}));
  }
  for (const std::string& id : d.unmatched_image_objects) {
    const SgObject* obj = pair.image_sg.find(id);
    std::size_t f = pick_form(troot, "disappearance", id, 3);
    out.push_back(make_qa(kDisappearance[f], {{"label", obj->label}, {"view", view}}, "object",
                          "disappearance", {id}));
  }
  if (!d.unmatched_other_objects.empty()) {
    std::vector<std::string> labels;
    for (const std::string& id : d.unmatched_other_objects) {
      labels.push_back(pair.other_sg.find(id)->label);
    }
    std::size_t f = pick_form(troot, "new_object", join(d.unmatched_other_objects, ","), 3);
    out.push_back(make_qa(kNewObject[f],
                          {{"view", view},
                           {"phase", phase_word(pair)},
                           {"list", join(labels, " and a ")},
                           {"plain", join(labels, " and ")}},
                          "object", "new_object", d.unmatched_other_objects));
  }
  for (const auto& [img_id, oth_id] : pair.links) {
    const SgObject* a = pair.image_sg.find(img_id);
    const SgObject* b = pair.other_sg.find(oth_id);
    if (a->attributes == b->attributes || a->attributes.empty() || b->attributes.empty()) continue;
    std::size_t f = pick_form(troot, "state_change", img_id + "," + oth_id, 3);
    out.push_back(make_qa(kStateChange[f],
                          {{"label", a->label},
                           {"view", view},
                           {"before", join(a->attributes, " and ")},
                           {"after", join(b->attributes, " and ")}},
                          "object", "state_change", {img_id, oth_id}));
  }
  if (pair.pair_kind == "image_video") {
    // Motion continuity: a linked object whose relation set shifts across
    // views is doing something different in the video.
    std::map<std::string, std::string> inv;
    for (const auto& [img_id, oth_id] : pair.links) inv[oth_id] = img_id;
    std::set<std::string> moving;
    for (const auto& c : d.changed_relations) {
      moving.insert(c.before.subject_id);
      moving.insert(c.before.object_id);
    }
    for (const SgRelation& r : d.removed_relations) {
      moving.insert(r.subject_id);
      moving.insert(r.object_id);
    }
    for (const SgRelation& r : d.new_relations) {
      auto is = inv.find(r.subject_id);
      auto io = inv.find(r.object_id);
      if (is != inv.end()) moving.insert(is->second);
      if (io != inv.end()) moving.insert(io->second);
    }
    for (const SgObject& obj : pair.image_sg.objects) {
      if (!moving.count(obj.id)) continue;
      std::size_t f = pick_form(troot, "motion", obj.id, 3);
      out.push_back(
          make_qa(kMotion[f], {{"label", obj.label}, {"view", view}}, "object", "motion", {obj.id}));
    }
  }
  return out;
}

std::vector<QAPair> gen_relation_qa(const PairedSceneGraph& pair, std::uint64_t seed) {
  GraphDiff d = diff_graphs(pair);
  std::uint64_t troot = substream(seed, "templates");
  std::string view = view_word(pair);
  std::vector<QAPair> out;

  auto img_label = [&pair](const std::string& id) { return pair.image_sg.find(id)->label; };
  auto oth_label = [&pair](const std::string& id) { return pair.other_sg.find(id)->label; };

  for (const SgRelation& r : d.persistent_relations) {
    std::string key = r.subject_id + "," + r.predicate + "," + r.object_id;
    std::size_t f = pick_form(troot, "persistence", key, 3);
    out.push_back(make_qa(kPersistenceYes[f],
                          {{"s", img_label(r.subject_id)},
                           {"o", img_label(r.object_id)},
                           {"p", r.predicate},
                           {"view", view}},
                          "relation", "persistence", {r.subject_id, r.object_id}));
  }
  for (const SgRelation& r : d.removed_relations) {
    std::string key = r.subject_id + "," + r.predicate + "," + r.object_id + ",gone";
    std::size_t f = pick_form(troot, "persistence", key, 3);
    out.push_back(make_qa(kPersistenceNo[f],
                          {{"s", img_label(r.subject_id)},
                           {"o", img_label(r.object_id)},
                           {"p", r.predicate},
                           {"view", view}},
                          "relation", "persistence", {r.subject_id, r.object_id}));
  }
  for (const auto& c : d.changed_relations) {
    std::string key = c.before.subject_id + "," + c.before.predicate + "," + c.after.predicate + "," +
                      c.before.object_id;
    std::size_t f = pick_form(troot, "evolution", key, 3);
    out.push_back(make_qa(kEvolution[f],
                          {{"s", img_label(c.before.subject_id)},
                           {"o", img_label(c.before.object_id)},
                           {"p1", c.before.predicate},
                           {"p2", c.after.predicate},
                           {"view", view}},
                          "relation", "evolution",
                          {c.before.subject_id, c.before.object_id}));
  }
  for (const SgRelation& r : d.new_relations) {
    std::string key = r.subject_id + "," + r.predicate + "," + r.object_id + ",new";
    std::size_t f = pick_form(troot, "emergence", key, 3);
    out.push_back(make_qa(kEmergence[f],
                          {{"s", oth_label(r.subject_id)},
                           {"o", oth_label(r.object_id)},
                           {"p", r.predicate},
                           {"view", view}},
                          "relation", "emergence", {r.subject_id, r.object_id}));
  }
  return out;
}

std::vector<QAPair> generate_pair_qas(const PairedSceneGraph& pair, std::uint64_t seed,
                                      std::size_t cap) {
  std::vector<QAPair> out = gen_object_qa(pair, seed);
  std::vector<QAPair> rel = gen_relation_qa(pair, seed);
  out.insert(out.end(), rel.begin(), rel.end());
  if (cap > 0 && out.size() > cap) out.resize(cap);
  return out;
}

QaJudgment validate_qa(const PairedSceneGraph& pair, const QAPair& qa) {
  if (qa.level != "object" && qa.level != "relation") {
    return {false, "unknown level: " + qa.level};
  }
  static const std::set<std::string> kCategories = {
      "appearance", "disappearance", "motion",    "state_change",
      "new_object", "persistence",   "emergence", "evolution"};
  if (!kCategories.count(qa.category)) return {false, "unknown category: " + qa.category};
  for (const std::string& id : qa.provenance) {
    if (!pair.image_sg.find(id) && !pair.other_sg.find(id)) {
      return {false, "unknown id: " + id};
    }
  }
  std::set<std::string> vocab;
  auto add_graph = [&vocab](const SceneGraph& sg) {
    for (const SgObject& o : sg.objects) {
      for (const std::string& w : tokenize_words(o.label)) vocab.insert(w);
      for (const std::string& a : o.attributes) {
        for (const std::string& w : tokenize_words(a)) vocab.insert(w);
      }
    }
    for (const SgRelation& r : sg.relations) {
      for (const std::string& w : tokenize_words(r.predicate)) vocab.insert(w);
    }
  };
  add_graph(pair.image_sg);
  add_graph(pair.other_sg);
  const std::set<std::string>& lex = template_lexicon();
  for (const std::string& w : tokenize_words(qa.answer)) {
    if (!lex.count(w) && !vocab.count(w)) return {false, "ungrounded label: " + w};
  }
  return {true, ""};
}

std::size_t emit_jsonl(const std::vector<QAPair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write QA file: " + path);
  for (const QAPair& qa : pairs) {
    ordered_json j;
    j["question"] = qa.question;
    j["answer"] = qa.answer;
    j["level"] = qa.level;
    j["category"] = qa.category;
    j["provenance"] = qa.provenance;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
  return pairs.size();
}

std::vector<QAPair> read_qa_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open QA file: " + path);
  std::vector<QAPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("QA line " + std::to_string(line_no) + " is not valid JSON");
    QAPair qa;
    qa.question = j.at("question").get<std::string>();
    qa.answer = j.at("answer").get<std::string>();
    qa.level = j.at("level").get<std::string>();
    qa.category = j.at("category").get<std::string>();
    qa.provenance = j.at("provenance").get<std::vector<std::string>>();
    out.push_back(std::move(qa));
  }
  return out;
}

PairedSceneGraph random_paired_graph(Rng& rng, std::size_t max_objects) {
  if (max_objects < 2) throw ParameterError("random pair needs at least two objects");
  static const char* kLabels[] = {"adult", "ball", "dog",  "chair", "table", "cup",
                                  "tree",  "car",  "child", "lamp",  "book",  "bird"};
  static const char* kPreds[] = {"holding", "pushing", "near", "on", "behind", "watching"};
  static const char* kAttrs[] = {"red", "blue", "small", "large", "standing", "moving"};

  PairedSceneGraph pair;
  pair.pair_kind = rng.below(2) ? "image_video" : "image_3d";
  pair.image_sg.view_tag = "image";
  pair.other_sg.view_tag = pair.pair_kind == "image_video" ? "video" : "3d";

  std::size_t n = 2 + rng.below(max_objects - 1);
  for (std::size_t i = 0; i < n; ++i) {
    SgObject o;
    o.id = "i" + std::to_string(i);
    o.label = kLabels[rng.below(std::size(kLabels))];
    if (rng.below(2)) o.attributes.push_back(kAttrs[rng.below(std::size(kAttrs))]);
    pair.image_sg.objects.push_back(std::move(o));
  }
  std::set<std::string> used_pairs;
  std::size_t rel_count = rng.below(n + 1);
  for (std::size_t i = 0; i < rel_count; ++i) {
    std::size_t s = rng.below(n), o = rng.below(n);
    if (s == o) continue;
    std::string sid = "i" + std::to_string(s), oid = "i" + std::to_string(o);
    if (!used_pairs.insert(pair_key(sid, oid)).second) continue;
    pair.image_sg.relations.push_back({sid, kPreds[rng.below(std::size(kPreds))], oid, false, {0, 0}});
  }

  // Keep most objects, flip some attributes, drop the rest.
  std::map<std::string, std::string> kept;  // image id -> other id
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.below(4) == 0) continue;  // dropped on the other side
    const SgObject& src = pair.image_sg.objects[i];
    SgObject o;
    o.id = "v" + std::to_string(i);
    o.label = src.label;
    o.attributes = src.attributes;
    if (!o.attributes.empty() && rng.below(4) == 0) {
      o.attributes[0] = kAttrs[rng.below(std::size(kAttrs))];
    }
    kept[src.id] = o.id;
    pair.other_sg.objects.push_back(std::move(o));
    pair.links[src.id] = kept[src.id];
  }
  std::size_t added = rng.below(3);
  for (std::size_t i = 0; i < added; ++i) {
    SgObject o;
    o.id = "x" + std::to_string(i);
    o.label = kLabels[rng.below(std::size(kLabels))];
    pair.other_sg.objects.push_back(std::move(o));
  }

  bool video = pair.pair_kind == "image_video";
  std::set<std::string> used_other_pairs;
  auto push_other = [&](const std::string& s, const std::string& p, const std::string& o) {
    if (s == o) return;
    if (!used_other_pairs.insert(pair_key(s, o)).second) return;
    SgRelation r{s, p, o, false, {0, 0}};
    if (video && rng.below(2)) {
      long a = static_cast<long>(rng.below(20));
      r.has_span = true;
      r.frame_span = {a, a + static_cast<long>(rng.below(30))};
    }
    pair.other_sg.relations.push_back(std::move(r));
  };
  for (const SgRelation& r : pair.image_sg.relations) {
    auto si = kept.find(r.subject_id);
    auto oi = kept.find(r.object_id);
    if (si == kept.end() || oi == kept.end()) continue;  // endpoint dropped -> relation removed
    std::size_t roll = rng.below(5);
    if (roll < 3) {
      push_other(si->second, r.predicate, oi->second);  // persists
    } else if (roll == 3) {
      std::string p = kPreds[rng.below(std::size(kPreds))];
      if (p == r.predicate) p = p == "near" ? "on" : "near";
      push_other(si->second, p, oi->second);  // predicate evolves
    }
    // roll == 4: relation dropped entirely
  }
  std::size_t extra = rng.below(3);
  std::size_t total_other = pair.other_sg.objects.size();
  for (std::size_t i = 0; i < extra && total_other >= 2; ++i) {
    const SgObject& s = pair.other_sg.objects[rng.below(total_other)];
    const SgObject& o = pair.other_sg.objects[rng.below(total_other)];
    push_other(s.id, kPreds[rng.below(std::size(kPreds))], o.id);
  }
  pair.validate();
  return pair;
}

}  // namespace polyv
