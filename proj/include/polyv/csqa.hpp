#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "polyv/rng.hpp"

namespace polyv {

struct SgObject {
  std::string id;
  std::string label;
  std::vector<std::string> attributes;
};

struct SgRelation {
  std::string subject_id;
  std::string predicate;
  std::string object_id;
  bool has_span = false;            // video relations may carry a frame span
  std::array<long, 2> frame_span{0, 0};
};

struct SceneGraph {
  std::string view_tag;  // image | video | 3d
  std::vector<SgObject> objects;
  std::vector<SgRelation> relations;

  // Unique ids, relation endpoints resolve, spans only on video graphs.
  void validate() const;
  const SgObject* find(const std::string& id) const;
};

// Image-side graph paired with a video or 3D graph; links map image object
// ids to their counterparts on the other side (injective).
struct PairedSceneGraph {
  SceneGraph image_sg;
  SceneGraph other_sg;
  std::map<std::string, std::string> links;
  std::string pair_kind;  // image_video | image_3d

  void validate() const;
};

PairedSceneGraph paired_graph_from_json_text(const std::string& text);
PairedSceneGraph load_paired_graph(const std::string& path);
std::string paired_graph_to_json_text(const PairedSceneGraph& pair);

// Structural diff over the link map. Relations are compared as triples after
// translating other-side endpoints into image ids; relations touching an
// unlinked endpoint can never match and land in new_relations (other side)
// or removed_relations (image side).
struct GraphDiff {
  std::vector<std::string> unmatched_image_objects;  // image ids with no link
  std::vector<std::string> unmatched_other_objects;  // other ids never linked to
  std::vector<SgRelation> persistent_relations;      // image-id space
  struct ChangedRelation {
    SgRelation before;  // image-id space
    SgRelation after;   // other-id space, same linked (subject, object) pair
  };
  std::vector<ChangedRelation> changed_relations;
  std::vector<SgRelation> new_relations;      // other-id space
  std::vector<SgRelation> removed_relations;  // image-id space
};

GraphDiff diff_graphs(const PairedSceneGraph& pair);

struct QAPair {
  std::string question;
  std::string answer;
  std::string level;     // object | relation
  std::string category;  // appearance, disappearance, motion, state_change,
                         // new_object, persistence, emergence, evolution
  std::vector<std::string> provenance;  // ids the QA is about
};

// Template-instantiated QAs over the diff; wording is picked from a bank of
// surface forms by a seeded hash, so (pair, seed) fixes the output exactly.
std::vector<QAPair> gen_object_qa(const PairedSceneGraph& pair, std::uint64_t seed);
std::vector<QAPair> gen_relation_qa(const PairedSceneGraph& pair, std::uint64_t seed);

// Object + relation QAs with a per-pair cap applied after generation.
std::vector<QAPair> generate_pair_qas(const PairedSceneGraph& pair, std::uint64_t seed,
                                      std::size_t cap = 8);

struct QaJudgment {
  bool accepted = false;
  std::string reason;  // empty when accepted
};

// Grounding check: every content word of the answer must appear in either
// graph (labels, predicates, attributes) and every provenance id must exist.
QaJudgment validate_qa(const PairedSceneGraph& pair, const QAPair& qa);

// One JSON object per line, keys question/answer/level/category/provenance
// in that order. Returns lines written.
std::size_t emit_jsonl(const std::vector<QAPair>& pairs, const std::string& path);
std::vector<QAPair> read_qa_jsonl(const std::string& path);

// Seeded fixture: a small consistent pair with kept / dropped / added
// objects, attribute flips, and predicate changes. Used by tests and the
// demo corpus mode of the CLI.
PairedSceneGraph random_paired_graph(Rng& rng, std::size_t max_objects = 10);

}  // namespace polyv
