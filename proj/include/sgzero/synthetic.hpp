#pragma once

// Blocks-world scene graphs for desk-scale experiments.
//
// Predicates are geometric rules (left of, above, inside, ...). A rule may fire
// for a pair only if the predicate is compatible with the semantic groups of the
// two entity classes; among the rules that fire, a per-class-pair priority picks
// the annotated one. Class frequencies are Zipf-skewed, so a few triplets
// dominate. A held-out set of triplet compositions is stripped from the training
// relations (those pairs become background there) and kept in test.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgzero/features.hpp"
#include "sgzero/rng.hpp"
#include "sgzero/sgdata.hpp"
#include "sgzero/spatial.hpp"

namespace sgz {

struct GenConfig {
  std::uint32_t num_entity_classes = 12;
  std::uint32_t num_predicates = 5;
  std::uint32_t num_groups = 3;
  std::uint32_t train_images = 400;
  std::uint32_t test_images = 150;
  std::uint32_t min_entities = 3;
  std::uint32_t max_entities = 8;
  double holdout_fraction = 0.25;
  double zipf_exponent = 1.0;
  double annotation_rate = 0.9;
  double compat_density = 0.5;
  double nested_box_rate = 0.25;
  std::uint32_t feature_dim = 32;
  std::uint32_t embed_dim = 32;
  double feature_noise = 0.1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GenConfig, num_entity_classes, num_predicates,
                                                num_groups, train_images, test_images,
                                                min_entities, max_entities, holdout_fraction,
                                                zipf_exponent, annotation_rate, compat_density,
                                                nested_box_rate, feature_dim, embed_dim,
                                                feature_noise)

struct SyntheticData {
  Dataset train;
  Dataset test;
  FeatureStore features;
  EmbeddingTable embeddings;
  TripletSet holdout;    // compositions removed from train, present in test
  TripletSet plausible;  // every composition the generator's rules allow
};

inline constexpr std::array<const char*, 10> kGeometricPredicates = {
    "left_of", "above", "inside", "overlapping", "larger_than",
    "right_of", "below", "contains", "near", "smaller_than"};

/// Truth value of geometric predicate `rule` for subject box s and object box o.
inline bool geometric_rule(std::size_t rule, const BBox& s, const BBox& o, double w, double h) {
  auto within = [](const BBox& a, const BBox& b) {
    return a.x1 >= b.x1 && a.x2 <= b.x2 && a.y1 >= b.y1 && a.y2 <= b.y2;
  };
  const double inter = intersection_area(s, o);
  switch (rule) {
    case 0: return s.x2 <= o.x1;
    case 1: return s.y2 <= o.y1;
    case 2: return within(s, o);
    case 3: return inter > 0 && !within(s, o) && !within(o, s);
    case 4: return s.area() >= 2.0 * o.area();
    case 5: return s.x1 >= o.x2;
    case 6: return s.y1 >= o.y2;
    case 7: return within(o, s);
    case 8: {
      if (inter > 0) return false;
      const double gx = std::max({0.0, o.x1 - s.x2, s.x1 - o.x2});
      const double gy = std::max({0.0, o.y1 - s.y2, s.y1 - o.y2});
      return std::hypot(gx, gy) < 0.1 * std::max(w, h);
    }
    case 9: return 2.0 * s.area() <= o.area();
    default: throw std::out_of_range("geometric_rule: unknown rule");
  }
}

inline void validate_gen_config(const GenConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("GenConfig: " + m); };
  if (c.num_entity_classes < 6) fail("num_entity_classes must be >= 6");
  if (c.num_predicates < 5 || c.num_predicates > kGeometricPredicates.size()) {
    fail("num_predicates must be in [5, 10]");
  }
  if (c.train_images + c.test_images < 50) fail("at least 50 images required");
  if (c.train_images == 0 || c.test_images == 0) fail("both splits need images");
  if (c.holdout_fraction < 0.0 || c.holdout_fraction >= 0.5) fail("holdout_fraction must be in [0, 0.5)");
  if (c.min_entities < 2 || c.min_entities > c.max_entities) fail("entity count range invalid");
  if (c.num_groups == 0 || c.num_groups > c.num_entity_classes) fail("num_groups out of range");
  if (c.feature_dim == 0 || c.embed_dim == 0) fail("dimensions must be positive");
  if (!(c.annotation_rate > 0.0 && c.annotation_rate <= 1.0)) fail("annotation_rate must be in (0, 1]");
}

namespace detail {

inline std::vector<double> unit_gaussian(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = n(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

inline std::vector<double> blend_unit(const std::vector<double>& shared, const std::vector<double>& own,
                                      double shared_weight) {
  std::vector<double> v(shared.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = shared_weight * shared[i] + (1.0 - shared_weight) * own[i];
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

struct World {
  GenConfig cfg;
  std::vector<std::uint32_t> group;                 // per entity class
  std::vector<std::vector<bool>> compatible;        // [gs * G + go][p]
  std::vector<std::vector<std::uint32_t>> priority;  // [s * E + o] -> predicate order
  std::vector<double> class_weight;                 // Zipf sampling weights
  std::vector<std::vector<double>> class_code;      // feature_dim per class
  std::vector<double> box_proj;                     // feature_dim x 5
  std::vector<double> union_proj;                   // feature_dim x 20

  bool allows(std::uint32_t s, std::uint32_t p, std::uint32_t o) const {
    return compatible[group[s] * cfg.num_groups + group[o]][p];
  }
};

inline World make_world(const GenConfig& cfg, std::uint64_t seed) {
  World w;
  w.cfg = cfg;
  const auto E = cfg.num_entity_classes, P = cfg.num_predicates, G = cfg.num_groups;
  for (std::uint32_t c = 0; c < E; ++c) w.group.push_back(c % G);

  auto rules = stream(seed, 1);
  std::bernoulli_distribution coin(cfg.compat_density);
  w.compatible.assign(G * G, std::vector<bool>(P, false));
  for (auto& row : w.compatible)
    for (std::size_t p = 0; p < P; ++p) row[p] = coin(rules);
  for (std::uint32_t p = 0; p < P; ++p) {
    bool any = false;
    for (const auto& row : w.compatible) any = any || row[p];
    if (!any) w.compatible[std::uniform_int_distribution<std::uint32_t>(0, G * G - 1)(rules)][p] = true;
  }
  w.priority.resize(E * E);
  for (auto& order : w.priority) {
    order.resize(P);
    std::iota(order.begin(), order.end(), 0u);
    std::shuffle(order.begin(), order.end(), rules);
  }
  std::vector<std::uint32_t> rank(E);
  std::iota(rank.begin(), rank.end(), 0u);
  std::shuffle(rank.begin(), rank.end(), rules);
  w.class_weight.resize(E);
  for (std::uint32_t c = 0; c < E; ++c) {
    w.class_weight[c] = 1.0 / std::pow(static_cast<double>(rank[c] + 1), cfg.zipf_exponent);
  }

  auto feat = stream(seed, 2);
  std::normal_distribution<double> n01(0.0, 1.0);
  w.class_code.resize(E);
  for (auto& code : w.class_code) {
    code.resize(cfg.feature_dim);
    for (auto& x : code) x = n01(feat);
  }
  w.box_proj.resize(cfg.feature_dim * 5);
  for (auto& x : w.box_proj) x = n01(feat);
  w.union_proj.resize(cfg.feature_dim * kSpatialDim);
  for (auto& x : w.union_proj) x = n01(feat) / std::sqrt(static_cast<double>(kSpatialDim));
  return w;
}

inline BBox sample_box(const World& w, const std::vector<Entity>& prev, double W, double H,
                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (!prev.empty() && u01(rng) < w.cfg.nested_box_rate) {
    const BBox& parent = prev[std::uniform_int_distribution<std::size_t>(0, prev.size() - 1)(rng)].box;
    const double fw = 0.3 + 0.4 * u01(rng), fh = 0.3 + 0.4 * u01(rng);
    const double bw = parent.width() * fw, bh = parent.height() * fh;
    const double x1 = parent.x1 + u01(rng) * (parent.width() - bw);
    const double y1 = parent.y1 + u01(rng) * (parent.height() - bh);
    return {x1, y1, x1 + bw, y1 + bh};
  }
  const double bw = W * (0.1 + 0.35 * u01(rng)), bh = H * (0.1 + 0.35 * u01(rng));
  const double x1 = u01(rng) * (W - bw), y1 = u01(rng) * (H - bh);
  return {x1, y1, x1 + bw, y1 + bh};
}

inline SceneGraph sample_image(const World& w, std::uint64_t id, std::mt19937_64& rng) {
  const auto& cfg = w.cfg;
  SceneGraph g;
  g.image_id = id;
  g.width = std::uniform_int_distribution<std::uint32_t>(320, 640)(rng);
  g.height = std::uniform_int_distribution<std::uint32_t>(320, 640)(rng);
  const auto n = std::uniform_int_distribution<std::uint32_t>(cfg.min_entities, cfg.max_entities)(rng);
  std::discrete_distribution<std::uint32_t> cls(w.class_weight.begin(), w.class_weight.end());
  for (std::uint32_t i = 0; i < n; ++i) {
    Entity e;
    e.label = cls(rng);
    e.box = sample_box(w, g.entities, g.width, g.height, rng);
    g.entities.push_back(e);
  }
  std::bernoulli_distribution annotate(cfg.annotation_rate);
  for (std::uint32_t s = 0; s < n; ++s) {
    for (std::uint32_t o = 0; o < n; ++o) {
      if (s == o) continue;
      const auto ls = g.entities[s].label, lo = g.entities[o].label;
      const bool keep = annotate(rng);
      for (std::uint32_t p : w.priority[ls * cfg.num_entity_classes + lo]) {
        if (!w.allows(ls, p, lo)) continue;
        if (!geometric_rule(p, g.entities[s].box, g.entities[o].box, g.width, g.height)) continue;
        if (keep) g.relations.push_back({s, o, p});
        break;
      }
    }
  }
  return g;
}

inline std::vector<float> noisy_projection(const std::vector<double>& base, const std::vector<double>& proj,
                                           std::span<const double> input, double noise,
                                           std::mt19937_64& rng) {
  std::normal_distribution<double> eps(0.0, noise);
  const std::size_t dim = proj.size() / input.size();
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    double v = base.empty() ? 0.0 : base[i];
    for (std::size_t j = 0; j < input.size(); ++j) v += proj[i * input.size() + j] * input[j];
    out[i] = static_cast<float>(v + (noise > 0 ? eps(rng) : 0.0));
  }
  return out;
}

inline void add_features(const World& w, const SceneGraph& g, FeatureStore& fs, std::mt19937_64& rng) {
  const double W = g.width, H = g.height;
  for (std::uint32_t i = 0; i < g.entities.size(); ++i) {
    const auto& e = g.entities[i];
    const std::array<double, 5> geo{e.box.x1 / W, e.box.y1 / H, e.box.x2 / W, e.box.y2 / H,
                                    e.box.area() / (W * H)};
    fs.put_entity(g.image_id, i, noisy_projection(w.class_code[e.label], w.box_proj, geo, w.cfg.feature_noise, rng));
  }
  for (std::uint32_t s = 0; s < g.entities.size(); ++s) {
    for (std::uint32_t o = 0; o < g.entities.size(); ++o) {
      if (s == o) continue;
      const auto sp = relative_spatial(g.entities[s].box, g.entities[o].box, W, H).concatenated();
      fs.put_union(g.image_id, s, o, noisy_projection({}, w.union_proj, sp, w.cfg.feature_noise, rng));
    }
  }
}

inline EmbeddingTable make_embeddings(const World& w, const Dataset& ds, std::uint64_t seed) {
  auto rng = stream(seed, 3);
  const auto dim = w.cfg.embed_dim;
  EmbeddingTable table(dim);
  std::vector<std::vector<double>> group_vec;
  for (std::uint32_t k = 0; k < w.cfg.num_groups; ++k) group_vec.push_back(unit_gaussian(dim, rng));
  for (std::uint32_t c = 0; c < ds.entity_classes.size(); ++c) {
    table.put(ds.entity_classes[c], blend_unit(group_vec[w.group[c]], unit_gaussian(dim, rng), 0.7));
  }
  // Predicates pair up into mirrored families (left/right, above/below, ...).
  std::vector<std::vector<double>> family_vec;
  for (std::uint32_t k = 0; k < 5; ++k) family_vec.push_back(unit_gaussian(dim, rng));
  for (std::uint32_t p = 0; p < ds.predicate_classes.size(); ++p) {
    table.put(ds.predicate_classes[p], blend_unit(family_vec[p % 5], unit_gaussian(dim, rng), 0.5));
  }
  return table;
}

}  // namespace detail

inline SyntheticData generate_synthetic(const GenConfig& cfg, std::uint64_t seed) {
  validate_gen_config(cfg);
  const detail::World world = detail::make_world(cfg, seed);

  SyntheticData out;
  std::vector<std::string> ents, preds;
  for (std::uint32_t c = 0; c < cfg.num_entity_classes; ++c) {
    ents.push_back("obj" + std::string(c < 10 ? "0" : "") + std::to_string(c));
  }
  for (std::uint32_t p = 0; p < cfg.num_predicates; ++p) preds.emplace_back(kGeometricPredicates[p]);
  for (Dataset* ds : {&out.train, &out.test}) {
    ds->entity_classes = ents;
    ds->predicate_classes = preds;
  }
  out.train.split = Split::train;
  out.test.split = Split::test;

  auto train_rng = stream(seed, 10);
  auto test_rng = stream(seed, 11);
  for (std::uint32_t i = 0; i < cfg.train_images; ++i) {
    out.train.graphs.push_back(detail::sample_image(world, i, train_rng));
  }
  for (std::uint32_t i = 0; i < cfg.test_images; ++i) {
    out.test.graphs.push_back(detail::sample_image(world, cfg.train_images + i, test_rng));
  }

  // Hold out a fraction of the test compositions that the training split
  // naturally covers, never emptying a predicate class in train.
  std::map<TripletKey, std::size_t> train_counts;
  for (const auto& g : out.train.graphs)
    for (const auto& r : g.relations) ++train_counts[triplet_of(g, r)];
  std::vector<std::size_t> pred_remaining(cfg.num_predicates, 0);
  for (const auto& [k, n] : train_counts) pred_remaining[k.p] += n;
  const TripletSet test_set = triplet_set(out.test);
  std::vector<TripletKey> candidates;
  for (const auto& k : test_set)
    if (train_counts.count(k)) candidates.push_back(k);
  auto hold_rng = stream(seed, 4);
  std::shuffle(candidates.begin(), candidates.end(), hold_rng);
  const auto target = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * test_set.size()));
  for (const auto& k : candidates) {
    if (out.holdout.size() >= target) break;
    if (pred_remaining[k.p] <= train_counts[k]) continue;
    pred_remaining[k.p] -= train_counts[k];
    out.holdout.insert(k);
  }
  if (out.holdout.size() < target) {
    throw std::invalid_argument("GenConfig: infeasible holdout (would empty a predicate class)");
  }
  for (auto& g : out.train.graphs) {
    std::erase_if(g.relations, [&](const Relation& r) { return out.holdout.count(triplet_of(g, r)) != 0; });
  }
  // Test compositions the training split never produced, other than the
  // held-out ones, are dropped so the zero-shot split is exactly the holdout.
  const TripletSet seen = triplet_set(out.train);
  for (auto& g : out.test.graphs) {
    std::erase_if(g.relations, [&](const Relation& r) {
      const auto k = triplet_of(g, r);
      return !seen.count(k) && !out.holdout.count(k);
    });
  }

  out.features = FeatureStore(cfg.feature_dim);
  auto feat_rng = stream(seed, 12);
  for (const auto* ds : {&out.train, &out.test})
    for (const auto& g : ds->graphs) detail::add_features(world, g, out.features, feat_rng);

  out.embeddings = detail::make_embeddings(world, out.train, seed);
  for (const auto& k : composition_space(cfg.num_entity_classes, cfg.num_predicates)) {
    if (world.allows(k.s, k.p, k.o)) out.plausible.insert(k);
  }
  return out;
}

}  // namespace sgz
