#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "sgzero/cen.hpp"
#include "sgzero/gradcheck.hpp"
#include "sgzero/tcl.hpp"
#include "test_util.hpp"

using namespace sgz;
using sgz::testing::permute_rows;
using sgz::testing::random_matrix;

namespace {

CenConfig small_config() {
  CenConfig c;
  c.feature_dim = 6;
  c.hidden = 8;
  c.box_hidden = 4;
  c.entity_layers = 2;
  c.relation_layers = 1;
  c.heads = 2;
  c.num_entity_classes = 5;
  c.num_predicates = 4;
  return c;
}

Tensor random_boxes(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({n, 4}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = 0.7 * u(rng), y = 0.7 * u(rng);
    t(i, 0) = x;
    t(i, 1) = y;
    t(i, 2) = x + 0.05 + 0.25 * u(rng);
    t(i, 3) = y + 0.05 + 0.25 * u(rng);
  }
  return t;
}

CenInput random_input(const CenConfig& c, std::size_t n, std::mt19937_64& rng) {
  CenInput in;
  in.entity_features = random_matrix(n, c.feature_dim, rng);
  in.entity_boxes = random_boxes(n, rng);
  in.pairs = ordered_pairs(n);
  in.union_features = random_matrix(in.pairs.size(), c.feature_dim, rng);
  in.spatial = random_matrix(in.pairs.size(), kSpatialDim, rng, -2.0, 2.0);
  return in;
}

std::size_t pair_row(std::size_t s, std::size_t o, std::size_t n) { return s * (n - 1) + (o < s ? o : o - 1); }

// y = leaky(x W + b) for one row, computed directly from the stored tensors.
std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double acc = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w(i, j);
    y[j] = acc;
  }
  return y;
}

std::vector<double> leaky(std::vector<double> x, double slope) {
  for (auto& v : x) v = v > 0 ? v : slope * v;
  return x;
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Star, IdentityExamples) {
  Graph g;
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Var w = g.constant(eye);
  Var r1 = nn::star(g.constant(Tensor::matrix(1, 2, {1, -1})), g.constant(Tensor::matrix(1, 2, {1, -1})), w, w);
  EXPECT_EQ(r1.value(), Tensor::matrix(1, 2, {2, 0}));
  Var r2 = nn::star(g.constant(Tensor::matrix(1, 2, {1, 0})), g.constant(Tensor::matrix(1, 2, {0, 1})), w, w);
  EXPECT_EQ(r2.value(), Tensor::matrix(1, 2, {0, 0}));
}

TEST(Star, ProjectedWidthMismatchThrows) {
  Graph g;
  Var x = g.constant(Tensor({1, 2}, 1.0));
  EXPECT_THROW(nn::star(x, x, g.constant(Tensor({2, 3}, 1.0)), g.constant(Tensor({2, 2}, 1.0))), ShapeError);
}

TEST(Star, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore ps;
    ps.add("x", random_matrix(3, 4, rng));
    ps.add("y", random_matrix(3, 5, rng));
    ps.add("wx", random_matrix(4, 6, rng));
    ps.add("wy", random_matrix(5, 6, rng));
    const auto rep = grad_check(
        [](Graph&, const BoundParams& p) { return sum(nn::star(p["x"], p["y"], p["wx"], p["wy"])); }, ps);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(CenConfigValidation, RejectsBadShapes) {
  std::mt19937_64 rng(0);
  CenConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(init_cen_params(c, rng), std::invalid_argument);
  c = small_config();
  c.relation_layers = 0;
  EXPECT_THROW(init_cen_params(c, rng), std::invalid_argument);
  c = small_config();
  c.num_predicates = 0;
  EXPECT_THROW(init_cen_params(c, rng), std::invalid_argument);
}

TEST(EncodeEntities, SingleEntityIsFinite) {
  std::mt19937_64 rng(2);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  Graph g;
  BoundParams p(g, ps);
  Var x = encode_entities(p, c, g.constant(random_matrix(1, c.feature_dim, rng)), g.constant(random_boxes(1, rng)));
  EXPECT_EQ(x.rows(), 1u);
  EXPECT_EQ(x.cols(), c.hidden);
  EXPECT_TRUE(x.value().all_finite());
}

TEST(EncodeEntities, ZeroLayersEqualsProjection) {
  std::mt19937_64 rng(3);
  CenConfig c = small_config();
  c.entity_layers = 0;
  const ParamStore ps = init_cen_params(c, rng);
  const Tensor feats = random_matrix(3, c.feature_dim, rng), boxes = random_boxes(3, rng);
  Graph g;
  BoundParams p(g, ps);
  Var x = encode_entities(p, c, g.constant(feats), g.constant(boxes));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> b(boxes.row(i).begin(), boxes.row(i).end());
    auto h = leaky(affine(b, ps.at("box_ffn.l1.w"), ps.at("box_ffn.l1.b")), c.leaky_slope);
    h = leaky(affine(h, ps.at("box_ffn.l2.w"), ps.at("box_ffn.l2.b")), c.leaky_slope);
    std::vector<double> in(feats.row(i).begin(), feats.row(i).end());
    in.insert(in.end(), h.begin(), h.end());
    const auto want = affine(in, ps.at("ent_in.w"), ps.at("ent_in.b"));
    for (std::size_t j = 0; j < c.hidden; ++j) EXPECT_NEAR(x.value()(i, j), want[j], 1e-12);
  }
}

TEST(EncodeEntities, PermutationEquivariant) {
  std::mt19937_64 rng(4);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + trial % 5;
    const Tensor feats = random_matrix(n, c.feature_dim, rng), boxes = random_boxes(n, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Graph g;
    BoundParams p(g, ps);
    Var a = encode_entities(p, c, g.constant(feats), g.constant(boxes));
    Var b = encode_entities(p, c, g.constant(permute_rows(feats, perm)), g.constant(permute_rows(boxes, perm)));
    expect_near(b.value(), permute_rows(a.value(), perm), 1e-10);
  }
}

TEST(EncodeRelations, CountsAndPermutationEquivariance) {
  std::mt19937_64 rng(5);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  EXPECT_EQ(ordered_pairs(2).size(), 2u);
  EXPECT_EQ(ordered_pairs(5).size(), 20u);
  for (std::size_t n : {2u, 5u}) {
    const std::size_t P = n * (n - 1);
    const Tensor x = random_matrix(P, c.hidden, rng);
    std::vector<std::size_t> perm(P);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Graph g;
    BoundParams p(g, ps);
    Var z = encode_relations(p, c, g.constant(x));
    EXPECT_EQ(z.rows(), P);
    Var zp = encode_relations(p, c, g.constant(permute_rows(x, perm)));
    expect_near(zp.value(), permute_rows(z.value(), perm), 1e-10);
  }
}

TEST(CenForward, EntityPermutationPermutesAllOutputs) {
  std::mt19937_64 rng(6);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  const std::size_t n = 4;
  const CenInput in = random_input(c, n, rng);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  CenInput q;
  q.entity_features = permute_rows(in.entity_features, perm);
  q.entity_boxes = permute_rows(in.entity_boxes, perm);
  q.pairs = ordered_pairs(n);
  std::vector<std::size_t> pair_perm;
  for (auto [s, o] : q.pairs) pair_perm.push_back(pair_row(perm[s], perm[o], n));
  q.union_features = permute_rows(in.union_features, pair_perm);
  q.spatial = permute_rows(in.spatial, pair_perm);

  Graph g;
  BoundParams p(g, ps);
  const CenOutput a = cen_forward(g, p, c, in), b = cen_forward(g, p, c, q);
  expect_near(b.logits.entity_logits.value(), permute_rows(a.logits.entity_logits.value(), perm), 1e-10);
  expect_near(b.logits.predicate_logits.value(), permute_rows(a.logits.predicate_logits.value(), pair_perm),
              1e-10);
}

TEST(CenForward, DeterministicWithoutDropout) {
  std::mt19937_64 rng(7);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  const CenInput in = random_input(c, 3, rng);
  Graph g1, g2;
  BoundParams p1(g1, ps), p2(g2, ps);
  EXPECT_EQ(cen_forward(g1, p1, c, in).logits.predicate_logits.value(),
            cen_forward(g2, p2, c, in).logits.predicate_logits.value());
}

TEST(FusePairs, SpatialPathIsLive) {
  std::mt19937_64 rng(8);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  const CenInput in = random_input(c, 3, rng);
  Graph g;
  BoundParams p(g, ps);
  Var ent = g.constant(random_matrix(3, c.hidden, rng));
  Var u = g.constant(in.union_features);
  const Tensor with = fuse_pairs(p, c, ent, in.pairs, u, g.constant(in.spatial)).value();
  const Tensor without = fuse_pairs(p, c, ent, in.pairs, u, g.constant(Tensor(in.spatial.shape(), 0.0))).value();
  EXPECT_NE(with, without);
  EXPECT_EQ(with.rows(), 6u);
}

TEST(Decode, WidthsAndZeroWeights) {
  std::mt19937_64 rng(9);
  const CenConfig c = small_config();
  ParamStore ps = init_cen_params(c, rng);
  const CenInput in = random_input(c, 3, rng);
  {
    Graph g;
    BoundParams p(g, ps);
    const CenOutput out = cen_forward(g, p, c, in);
    EXPECT_EQ(out.logits.entity_logits.cols(), c.num_entity_classes);
    EXPECT_EQ(out.logits.predicate_logits.cols(), c.num_predicates + 1);
    EXPECT_EQ(out.logits.predicate_logits.rows(), 6u);
  }
  for (const char* n : {"fc_obj.w", "fc_obj.b", "fc_rel.w", "fc_rel.b"}) {
    for (auto& v : ps.at(n).values()) v = 0.0;
  }
  Graph g;
  BoundParams p(g, ps);
  const CenOutput out = cen_forward(g, p, c, in);
  for (double v : out.logits.entity_logits.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : out.logits.predicate_logits.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(CenForward, RejectsWrongFeatureWidthAndSingleEntity) {
  std::mt19937_64 rng(10);
  const CenConfig c = small_config();
  const ParamStore ps = init_cen_params(c, rng);
  CenInput in = random_input(c, 3, rng);
  in.entity_features = random_matrix(3, c.feature_dim + 1, rng);
  Graph g;
  BoundParams p(g, ps);
  EXPECT_THROW(cen_forward(g, p, c, in), ShapeError);
  CenInput one = random_input(c, 1, rng);
  EXPECT_THROW(cen_forward(g, p, c, one), ShapeError);
}

TEST(CenForward, EveryParameterReceivesGradientAtInit) {
  std::mt19937_64 rng(11);
  CenConfig c;
  c.num_entity_classes = 6;
  c.num_predicates = 5;
  const ParamStore ps = init_cen_params(c, rng);
  const CenInput in = random_input(c, 4, rng);
  Graph g;
  BoundParams p(g, ps);
  const CenOutput out = cen_forward(g, p, c, in);
  std::vector<std::size_t> pt, et;
  for (std::size_t k = 0; k < in.pairs.size(); ++k) pt.push_back(k % (c.num_predicates + 1));
  for (std::size_t i = 0; i < 4; ++i) et.push_back(i);
  const auto ce = [](Var logits, const std::vector<std::size_t>& t) {
    return mean(loss_ce_margined(logits, t, Tensor({t.size(), logits.cols()}, 0.0)));
  };
  g.backward(add(ce(out.logits.predicate_logits, pt), ce(out.logits.entity_logits, et)));
  const ParamStore grads = p.gradients(ps);
  for (const auto& [name, t] : grads) {
    const bool live = std::any_of(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; });
    EXPECT_TRUE(live) << name << " has an all-zero gradient";
  }
}

TEST(CenForward, EndToEndGradientFromPredicateLoss) {
  std::mt19937_64 rng(12);
  const CenConfig c = small_config();
  for (int trial = 0; trial < 3; ++trial) {
    ParamStore ps = init_cen_params(c, rng);
    const CenInput in = random_input(c, 3, rng);
    ps.add("input.features", in.entity_features);
    ps.add("input.boxes", in.entity_boxes);
    ps.add("input.union", in.union_features);
    ps.add("input.spatial", in.spatial);
    std::vector<std::size_t> targets;
    for (std::size_t k = 0; k < in.pairs.size(); ++k) targets.push_back(rng() % (c.num_predicates + 1));
    const auto rep = grad_check(
        [&](Graph&, const BoundParams& p) {
          Var ent = encode_entities(p, c, p["input.features"], p["input.boxes"]);
          Var rel = encode_relations(p, c, fuse_pairs(p, c, ent, in.pairs, p["input.union"], p["input.spatial"]));
          Var logits = decode(p, ent, rel).predicate_logits;
          return mean(loss_ce_margined(logits, targets, Tensor({targets.size(), logits.cols()}, 0.0)));
        },
        ps);
    EXPECT_TRUE(rep.passed) << "max rel error " << rep.max_rel_error;
    EXPECT_GT(rep.checked, 1000u);
  }
}
