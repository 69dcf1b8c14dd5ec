#pragma once

// Contextual encoding network.
//
//   entity encoder   x_i  = Enc_obj([v_i, FFN(b_i)])
//   fusion           x'_p = (x_s * x_o) * FFN([v_u, b_so])
//   relation encoder z_j  = Enc_rel(x'_j) over all ordered pairs
//   decoders         e_i  = FC_obj(x_i),  r_j = FC_rel(z_j)
//
// where * is the star fusion operator with its own projections per stage. No
// linguistic embedding enters any path: nothing here takes an EmbeddingTable.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgzero/features.hpp"
#include "sgzero/nn.hpp"
#include "sgzero/sgdata.hpp"
#include "sgzero/spatial.hpp"

namespace sgz {

struct CenConfig {
  std::uint32_t feature_dim = 32;
  std::uint32_t hidden = 32;
  std::uint32_t box_hidden = 16;
  std::uint32_t entity_layers = 4;
  std::uint32_t relation_layers = 2;
  std::uint32_t heads = 4;
  std::uint32_t ff_mult = 2;
  double leaky_slope = 0.2;
  double dropout = 0.0;
  std::uint32_t num_entity_classes = 0;
  std::uint32_t num_predicates = 0;  // annotated predicate classes, background excluded
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CenConfig, feature_dim, hidden, box_hidden,
                                                entity_layers, relation_layers, heads, ff_mult,
                                                leaky_slope, dropout, num_entity_classes,
                                                num_predicates)

inline void validate_cen_config(const CenConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("CenConfig: " + m); };
  if (c.heads == 0 || c.hidden % c.heads != 0) fail("hidden must be divisible by heads");
  if (c.relation_layers < 1) fail("relation_layers must be >= 1");
  if (c.feature_dim == 0 || c.hidden == 0 || c.box_hidden == 0) fail("dimensions must be positive");
  if (c.num_entity_classes == 0 || c.num_predicates == 0) fail("class counts must be set");
  if (c.dropout < 0.0 || c.dropout >= 1.0) fail("dropout must be in [0, 1)");
}

/// Per-image network input. Pairs are every ordered (subject, object) with
/// subject != object, subject-major.
struct CenInput {
  Tensor entity_features;  // N x feature_dim
  Tensor entity_boxes;     // N x 4, corners normalized by image size
  Tensor union_features;   // P x feature_dim
  Tensor spatial;          // P x 20
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  std::size_t num_entities() const { return entity_features.rows(); }
};

inline std::vector<std::pair<std::uint32_t, std::uint32_t>> ordered_pairs(std::size_t n) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  out.reserve(n * (n > 0 ? n - 1 : 0));
  for (std::uint32_t s = 0; s < n; ++s)
    for (std::uint32_t o = 0; o < n; ++o)
      if (s != o) out.emplace_back(s, o);
  return out;
}

/// Builds the network input for one image. `boxes` overrides the annotated
/// boxes (pseudo-detections) when non-empty.
inline CenInput build_cen_input(const SceneGraph& g, const FeatureStore& fs,
                                const std::vector<BBox>& boxes = {},
                                OffsetFormula formula = OffsetFormula::corrected) {
  const std::size_t n = g.entities.size();
  if (n == 0) throw std::invalid_argument("cen input: image " + std::to_string(g.image_id) + " has no entities");
  const auto box_of = [&](std::size_t i) -> const BBox& { return boxes.empty() ? g.entities[i].box : boxes[i]; };
  const double W = g.width, H = g.height;
  CenInput in;
  in.entity_features = Tensor({n, fs.dim()}, 0.0);
  in.entity_boxes = Tensor({n, 4}, 0.0);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& f = fs.entity(g.image_id, i);
    for (std::size_t j = 0; j < f.size(); ++j) in.entity_features(i, j) = f[j];
    const BBox& b = box_of(i);
    in.entity_boxes(i, 0) = b.x1 / W;
    in.entity_boxes(i, 1) = b.y1 / H;
    in.entity_boxes(i, 2) = b.x2 / W;
    in.entity_boxes(i, 3) = b.y2 / H;
  }
  in.pairs = ordered_pairs(n);
  const std::size_t P = in.pairs.size();
  in.union_features = Tensor({P, fs.dim()}, 0.0);
  in.spatial = Tensor({P, kSpatialDim}, 0.0);
  for (std::size_t k = 0; k < P; ++k) {
    const auto [s, o] = in.pairs[k];
    const auto& u = fs.union_feature(g.image_id, s, o);
    for (std::size_t j = 0; j < u.size(); ++j) in.union_features(k, j) = u[j];
    const auto sp = relative_spatial(box_of(s), box_of(o), W, H, formula).concatenated();
    for (std::size_t j = 0; j < kSpatialDim; ++j) in.spatial(k, j) = sp[j];
  }
  return in;
}

template <class Rng>
ParamStore init_cen_params(const CenConfig& c, Rng& rng) {
  validate_cen_config(c);
  ParamStore ps;
  const nn::EncoderShape shape{c.hidden, c.heads, std::size_t{c.hidden} * c.ff_mult};
  nn::add_mlp2(ps, "box_ffn", 4, c.box_hidden, c.box_hidden, rng);
  nn::add_linear(ps, "ent_in", c.feature_dim + c.box_hidden, c.hidden, rng);
  for (std::uint32_t l = 0; l < c.entity_layers; ++l) {
    nn::add_encoder_layer(ps, "ent.L" + std::to_string(l), shape, rng);
  }
  if (c.entity_layers > 0) nn::add_layer_norm(ps, "ent.ln_out", c.hidden);
  nn::add_star(ps, "fuse.star1", c.hidden, c.hidden, c.hidden, rng);
  nn::add_mlp2(ps, "fuse.union_ffn", c.feature_dim + kSpatialDim, c.hidden, c.hidden, rng);
  nn::add_star(ps, "fuse.star2", c.hidden, c.hidden, c.hidden, rng);
  for (std::uint32_t l = 0; l < c.relation_layers; ++l) {
    nn::add_encoder_layer(ps, "rel.L" + std::to_string(l), shape, rng);
  }
  nn::add_layer_norm(ps, "rel.ln_out", c.hidden);
  nn::add_linear(ps, "fc_obj", c.hidden, c.num_entity_classes, rng);
  nn::add_linear(ps, "fc_rel", c.hidden, c.num_predicates + 1, rng);
  return ps;
}

/// Refined entity representations (N x hidden).
template <class Rng = std::mt19937_64>
Var encode_entities(const BoundParams& p, const CenConfig& c, Var features, Var boxes,
                    Rng* rng = nullptr) {
  Var box_code = nn::mlp2(p, "box_ffn", boxes, c.leaky_slope);
  Var x = nn::linear(p, "ent_in", concat_cols({features, box_code}));
  for (std::uint32_t l = 0; l < c.entity_layers; ++l) {
    x = nn::encoder_layer(p, "ent.L" + std::to_string(l), x, c.heads, c.dropout, rng);
  }
  if (c.entity_layers > 0) x = nn::layer_norm(p, "ent.ln_out", x);
  return x;
}

/// Initial predicate representations x'_p for every pair (P x hidden).
inline Var fuse_pairs(const BoundParams& p, const CenConfig& c, Var entities,
                      const std::vector<std::pair<std::uint32_t, std::uint32_t>>& pairs,
                      Var union_features, Var spatial) {
  std::vector<std::size_t> subj, obj;
  subj.reserve(pairs.size());
  obj.reserve(pairs.size());
  for (auto [s, o] : pairs) {
    subj.push_back(s);
    obj.push_back(o);
  }
  Var xs = gather_rows(entities, std::move(subj));
  Var xo = gather_rows(entities, std::move(obj));
  Var context = nn::mlp2(p, "fuse.union_ffn", concat_cols({union_features, spatial}), c.leaky_slope);
  return nn::star(p, "fuse.star2", nn::star(p, "fuse.star1", xs, xo), context);
}

template <class Rng = std::mt19937_64>
Var encode_relations(const BoundParams& p, const CenConfig& c, Var pair_features,
                     Rng* rng = nullptr) {
  Var z = pair_features;
  for (std::uint32_t l = 0; l < c.relation_layers; ++l) {
    z = nn::encoder_layer(p, "rel.L" + std::to_string(l), z, c.heads, c.dropout, rng);
  }
  return nn::layer_norm(p, "rel.ln_out", z);
}

struct Decoded {
  Var entity_logits;     // N x |C_e|
  Var predicate_logits;  // P x (|C_p| + 1), column 0 = background
};

inline Decoded decode(const BoundParams& p, Var entities, Var relations) {
  return {nn::linear(p, "fc_obj", entities), nn::linear(p, "fc_rel", relations)};
}

struct CenOutput {
  Var entities;
  Var pair_features;
  Var relations;
  Decoded logits;
};

template <class Rng = std::mt19937_64>
CenOutput cen_forward(Graph& g, const BoundParams& p, const CenConfig& c, const CenInput& in,
                      Rng* rng = nullptr) {
  if (in.entity_features.cols() != c.feature_dim) {
    throw ShapeError("cen: feature dim " + std::to_string(in.entity_features.cols()) +
                     " != configured " + std::to_string(c.feature_dim));
  }
  if (in.pairs.empty()) throw ShapeError("cen: image needs at least two entities");
  CenOutput out;
  out.entities = encode_entities(p, c, g.constant(in.entity_features), g.constant(in.entity_boxes), rng);
  out.pair_features = fuse_pairs(p, c, out.entities, in.pairs, g.constant(in.union_features),
                                 g.constant(in.spatial));
  out.relations = encode_relations(p, c, out.pair_features, rng);
  out.logits = decode(p, out.entities, out.relations);
  return out;
}

}  // namespace sgz
