#pragma once

// Scene-graph data model, JSON dataset I/O and label statistics.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgzero/bbox.hpp"

namespace sgz {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Predicate label space used by the classifiers: logit 0 is background and
/// predicate class p (0-based into Dataset::predicate_classes) sits at p + 1.
inline constexpr std::size_t kBackground = 0;
inline constexpr std::size_t logit_index(std::uint32_t predicate) { return predicate + 1; }

struct Entity {
  BBox box;
  std::uint32_t label = 0;
  friend bool operator==(const Entity&, const Entity&) = default;
};

struct Relation {
  std::uint32_t subj = 0;
  std::uint32_t obj = 0;
  std::uint32_t pred = 0;
  friend auto operator<=>(const Relation&, const Relation&) = default;
};

/// One annotated image. Entity i's visual feature is keyed (image_id, i) in the
/// FeatureStore.
struct SceneGraph {
  std::uint64_t image_id = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

enum class Split { train, test };

struct Dataset {
  std::vector<std::string> entity_classes;
  std::vector<std::string> predicate_classes;
  std::vector<SceneGraph> graphs;
  Split split = Split::train;
  std::size_t duplicates_removed = 0;

  std::size_t num_entity_classes() const { return entity_classes.size(); }
  std::size_t num_predicates() const { return predicate_classes.size(); }
  std::size_t num_relations() const {
    std::size_t n = 0;
    for (const auto& g : graphs) n += g.relations.size();
    return n;
  }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// A <subject class, predicate class, object class> label combination.
struct TripletKey {
  std::uint32_t s = 0;
  std::uint32_t p = 0;
  std::uint32_t o = 0;
  friend auto operator<=>(const TripletKey&, const TripletKey&) = default;
};

using TripletSet = std::set<TripletKey>;

inline TripletKey triplet_of(const SceneGraph& g, const Relation& r) {
  return {g.entities[r.subj].label, r.pred, g.entities[r.obj].label};
}

// ---------------------------------------------------------------------------
// Validation and JSON I/O

/// Clamps boxes to the image, rejects degenerate boxes, out-of-range indices and
/// self-relations, and drops duplicate relations (counted in duplicates_removed).
inline void validate_dataset(Dataset& ds) {
  const auto n_ent = ds.entity_classes.size();
  const auto n_pred = ds.predicate_classes.size();
  if (n_ent == 0 || n_pred == 0) throw DataError("dataset: empty class list");
  ds.duplicates_removed = 0;
  for (auto& g : ds.graphs) {
    const std::string where = "image " + std::to_string(g.image_id);
    if (g.width == 0 || g.height == 0) throw DataError(where + ": zero image dimension");
    for (std::size_t i = 0; i < g.entities.size(); ++i) {
      auto& e = g.entities[i];
      if (e.label >= n_ent) {
        throw DataError(where + ": entity " + std::to_string(i) + " label out of range");
      }
      e.box = clamp_to_image(e.box, g.width, g.height);
      if (!e.box.valid()) {
        throw DataError(where + ": entity " + std::to_string(i) + " has a degenerate box");
      }
    }
    std::set<Relation> seen;
    std::vector<Relation> kept;
    for (const auto& r : g.relations) {
      if (r.subj >= g.entities.size() || r.obj >= g.entities.size()) {
        throw DataError(where + ": relation entity index out of range");
      }
      if (r.subj == r.obj) throw DataError(where + ": relation with subject == object");
      if (r.pred >= n_pred) throw DataError(where + ": predicate index out of range");
      if (seen.insert(r).second) {
        kept.push_back(r);
      } else {
        ++ds.duplicates_removed;
      }
    }
    g.relations = std::move(kept);
  }
}

inline Dataset dataset_from_json(const nlohmann::json& j, Split split = Split::train) {
  Dataset ds;
  ds.split = split;
  try {
    ds.entity_classes = j.at("entity_classes").get<std::vector<std::string>>();
    ds.predicate_classes = j.at("predicate_classes").get<std::vector<std::string>>();
    for (const auto& im : j.at("images")) {
      SceneGraph g;
      g.image_id = im.at("id").get<std::uint64_t>();
      g.width = im.at("width").get<std::uint32_t>();
      g.height = im.at("height").get<std::uint32_t>();
      for (const auto& e : im.at("entities")) {
        const auto b = e.at("box").get<std::vector<double>>();
        if (b.size() != 4) throw DataError("image " + std::to_string(g.image_id) + ": box needs 4 numbers");
        g.entities.push_back({BBox{b[0], b[1], b[2], b[3]}, e.at("label").get<std::uint32_t>()});
      }
      for (const auto& r : im.at("relations")) {
        g.relations.push_back({r.at("subj").get<std::uint32_t>(), r.at("obj").get<std::uint32_t>(),
                               r.at("pred").get<std::uint32_t>()});
      }
      ds.graphs.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset: malformed file: ") + e.what());
  }
  validate_dataset(ds);
  return ds;
}

inline nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& g : ds.graphs) {
    nlohmann::json ents = nlohmann::json::array();
    for (const auto& e : g.entities) {
      ents.push_back({{"box", {e.box.x1, e.box.y1, e.box.x2, e.box.y2}}, {"label", e.label}});
    }
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& r : g.relations) {
      rels.push_back({{"subj", r.subj}, {"obj", r.obj}, {"pred", r.pred}});
    }
    images.push_back({{"id", g.image_id},
                      {"width", g.width},
                      {"height", g.height},
                      {"entities", std::move(ents)},
                      {"relations", std::move(rels)}});
  }
  return {{"entity_classes", ds.entity_classes},
          {"predicate_classes", ds.predicate_classes},
          {"images", std::move(images)}};
}

inline Dataset load_dataset(const std::string& path, Split split = Split::train) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset " + path + ": malformed JSON: " + e.what());
  }
  return dataset_from_json(j, split);
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write dataset " + path);
  os << dataset_to_json(ds).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Statistics

struct TripletStats {
  std::map<TripletKey, std::size_t> counts;
  std::size_t n_max = 0;
  std::size_t total = 0;
};

inline TripletStats compute_triplet_stats(const Dataset& train) {
  TripletStats st;
  for (const auto& g : train.graphs)
    for (const auto& r : g.relations) ++st.counts[triplet_of(g, r)];
  if (st.counts.empty()) throw DataError("triplet stats: dataset has no relations");
  for (const auto& [_, n] : st.counts) {
    st.n_max = std::max(st.n_max, n);
    st.total += n;
  }
  return st;
}

inline TripletSet triplet_set(const Dataset& ds) {
  TripletSet out;
  for (const auto& g : ds.graphs)
    for (const auto& r : g.relations) out.insert(triplet_of(g, r));
  return out;
}

inline void require_shared_classes(const Dataset& a, const Dataset& b) {
  if (a.entity_classes != b.entity_classes || a.predicate_classes != b.predicate_classes) {
    throw DataError("datasets do not share class lists");
  }
}

/// Triplet keys that occur in `test` relations and never in `train` relations.
inline TripletSet unseen_split(const Dataset& train, const Dataset& test) {
  require_shared_classes(train, test);
  const TripletSet seen = triplet_set(train);
  TripletSet out;
  for (const auto& k : triplet_set(test))
    if (!seen.count(k)) out.insert(k);
  return out;
}

/// Number of training relations per predicate class.
inline std::vector<std::size_t> predicate_counts(const Dataset& ds) {
  std::vector<std::size_t> out(ds.num_predicates(), 0);
  for (const auto& g : ds.graphs)
    for (const auto& r : g.relations) ++out[r.pred];
  return out;
}

/// Empirical p(predicate | subject class, object class) over the background-
/// augmented label space, with add-one smoothing. Background counts are ordered
/// entity pairs carrying no annotated relation.
class FrequencyBias {
 public:
  FrequencyBias() = default;

  explicit FrequencyBias(const Dataset& train)
      : n_ent_(train.num_entity_classes()), width_(train.num_predicates() + 1) {
    for (const auto& g : train.graphs) {
      std::set<std::pair<std::uint32_t, std::uint32_t>> related;
      for (const auto& r : g.relations) {
        auto& row = row_counts(g.entities[r.subj].label, g.entities[r.obj].label);
        row[logit_index(r.pred)] += 1.0;
        related.insert({r.subj, r.obj});
      }
      for (std::uint32_t s = 0; s < g.entities.size(); ++s) {
        for (std::uint32_t o = 0; o < g.entities.size(); ++o) {
          if (s == o || related.count({s, o})) continue;
          row_counts(g.entities[s].label, g.entities[o].label)[kBackground] += 1.0;
        }
      }
    }
  }

  std::size_t width() const noexcept { return width_; }

  /// Smoothed probability row; uniform for pairs never observed.
  std::vector<double> row(std::uint32_t s, std::uint32_t o) const {
    std::vector<double> out(width_, 1.0);
    double total = static_cast<double>(width_);
    auto it = counts_.find({s, o});
    if (it != counts_.end()) {
      for (std::size_t c = 0; c < width_; ++c) {
        out[c] += it->second[c];
        total += it->second[c];
      }
    }
    for (auto& v : out) v /= total;
    return out;
  }

  const std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<double>>& raw_counts() const {
    return counts_;
  }

 private:
  std::vector<double>& row_counts(std::uint32_t s, std::uint32_t o) {
    auto [it, inserted] = counts_.try_emplace({s, o}, std::vector<double>(width_, 0.0));
    return it->second;
  }

  std::size_t n_ent_ = 0;
  std::size_t width_ = 0;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<double>> counts_;
};

inline FrequencyBias frequency_bias_table(const Dataset& train) { return FrequencyBias(train); }

/// Drops relations whose subject and object boxes do not intersect.
inline Dataset object_overlap_filter(Dataset ds) {
  for (auto& g : ds.graphs) {
    std::erase_if(g.relations, [&](const Relation& r) {
      return intersection_area(g.entities[r.subj].box, g.entities[r.obj].box) <= 0.0;
    });
  }
  return ds;
}

/// Every label combination of the composition space, in lexicographic order.
inline std::vector<TripletKey> composition_space(std::size_t n_entity, std::size_t n_predicate) {
  std::vector<TripletKey> out;
  out.reserve(n_entity * n_entity * n_predicate);
  for (std::uint32_t s = 0; s < n_entity; ++s)
    for (std::uint32_t p = 0; p < n_predicate; ++p)
      for (std::uint32_t o = 0; o < n_entity; ++o) out.push_back({s, p, o});
  return out;
}

}  // namespace sgz
