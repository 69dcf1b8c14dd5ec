#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "sgzero/cen.hpp"
#include "sgzero/evalproto.hpp"
#include "metric_oracle.hpp"
#include "test_util.hpp"

using namespace sgz;
using namespace sgz::testing;

namespace {

SceneGraph two_relation_image() {
  SceneGraph g;
  g.image_id = 1;
  g.width = g.height = 100;
  g.entities = {{{0, 0, 40, 40}, 0}, {{50, 50, 90, 90}, 1}, {{0, 50, 40, 90}, 2}};
  g.relations = {{0, 1, 0}, {0, 2, 1}};  // keys (0,0,1) and (0,1,2)
  return g;
}

TripletPrediction pred_for(const SceneGraph& g, const Relation& r, double score) {
  return {g.entities[r.subj].box, g.entities[r.subj].label, r.pred, g.entities[r.obj].box, g.entities[r.obj].label,
          score, r.subj, r.obj};
}

RankInput uniform_input(std::size_t n, std::size_t preds, double logit = 0.0) {
  RankInput in;
  for (std::size_t i = 0; i < n; ++i) {
    in.boxes.push_back({10.0 * i, 0, 10.0 * i + 5, 5});
    in.labels.push_back(static_cast<std::uint32_t>(i % 2));
    in.label_scores.push_back(1.0);
  }
  in.pairs = ordered_pairs(n);
  in.predicate_logits = Tensor({in.pairs.size(), preds + 1}, logit);
  return in;
}

}  // namespace

TEST(Oracle, MetricsMatchBruteForceOnRandomMicroDatasets) {
  std::mt19937_64 rng(41);
  std::size_t zr_defined = 0, zr_absent = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Micro m = random_micro(rng);
    std::vector<ImageMatch> matches;
    for (std::size_t i = 0; i < m.graphs.size(); ++i) matches.push_back(match(m.ranked[i], m.graphs[i], 0.5));
    std::vector<std::size_t> train_counts{30, 10, 20};
    for (std::size_t k : {1u, 2u, 3u, 5u, 10u, 50u}) {
      EXPECT_EQ(recall_at_k(matches, k).value, oracle_recall(m, k, [](const TripletKey&) { return true; }));
      const auto zr = zero_shot_recall_at_k(matches, m.unseen, k);
      EXPECT_EQ(zr.value, oracle_recall(m, k, [&](const TripletKey& t) { return m.unseen.count(t) != 0; }));
      (zr.value ? zr_defined : zr_absent)++;

      const auto per = per_predicate_zr(matches, m.unseen, k, train_counts);
      std::size_t hits = 0, total = 0;
      for (std::size_t i = 0; i < per.size(); ++i) {
        const auto p = per[i].predicate;
        EXPECT_EQ(per[i].recall.value,
                  oracle_recall(m, k, [&](const TripletKey& t) { return t.p == p && m.unseen.count(t) != 0; }));
        ASSERT_TRUE(per[i].recall.value.has_value());
        if (i > 0) { EXPECT_GE(per[i - 1].train_count, per[i].train_count); }
        hits += per[i].recall.hits;
        total += per[i].recall.gt_total;
      }
      EXPECT_EQ(hits, zr.hits);
      EXPECT_EQ(total, zr.gt_total);
    }
    for (const auto& r : m.ranked) {
      const auto got = relational_nms(r, 0.5), want = oracle_nms(r, 0.5);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_TRUE(same_prediction(got[i], want[i]));
    }
  }
  EXPECT_GT(zr_defined, 100u);
  EXPECT_GT(zr_absent, 0u);
}

TEST(Oracle, RecallNonDecreasingInK) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const Micro m = random_micro(rng);
    std::vector<ImageMatch> matches;
    for (std::size_t i = 0; i < m.graphs.size(); ++i) matches.push_back(match(m.ranked[i], m.graphs[i], 0.5));
    double prev_r = -1, prev_z = -1;
    for (std::size_t k = 1; k <= 40; ++k) {
      const double r = *recall_at_k(matches, k).value;
      EXPECT_GE(r, prev_r);
      prev_r = r;
      if (auto z = zero_shot_recall_at_k(matches, m.unseen, k).value) {
        EXPECT_GE(*z, prev_z);
        prev_z = *z;
      }
    }
  }
}

TEST(ZeroShotRecall, HandCase) {
  const SceneGraph g = two_relation_image();
  const TripletSet unseen{{0, 0, 1}};  // T1 unseen, T2 = (0,1,2) seen
  const std::vector<TripletPrediction> ranked{pred_for(g, g.relations[1], 0.9), pred_for(g, g.relations[0], 0.8)};
  const std::vector<ImageMatch> m{match(ranked, g, 0.5)};
  EXPECT_EQ(m[0].rank, (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(*zero_shot_recall_at_k(m, unseen, 1).value, 0.0);
  EXPECT_EQ(*zero_shot_recall_at_k(m, unseen, 2).value, 1.0);
  EXPECT_EQ(*recall_at_k(m, 1).value, 0.5);
  EXPECT_FALSE(zero_shot_recall_at_k(m, {{2, 2, 2}}, 2).value.has_value());
}

TEST(ZeroShotRecall, ImagesWithoutUnseenTripletsAreIgnored) {
  SceneGraph a = two_relation_image(), b = two_relation_image();
  b.image_id = 2;
  b.relations = {{1, 2, 2}};  // key (1,2,2), seen
  const TripletSet unseen{{0, 0, 1}};
  const std::vector<ImageMatch> m{match({pred_for(a, a.relations[0], 1.0)}, a, 0.5), match({}, b, 0.5)};
  const auto z = zero_shot_recall_at_k(m, unseen, 5);
  EXPECT_EQ(*z.value, 1.0);
  EXPECT_EQ(z.contributing_images, 1u);
  EXPECT_EQ(*recall_at_k(m, 5).value, 0.25);
}

TEST(Match, VerbatimAndShiftedBoxes) {
  const SceneGraph g = two_relation_image();
  const std::vector<TripletPrediction> verbatim{pred_for(g, g.relations[0], 0.9), pred_for(g, g.relations[1], 0.5)};
  EXPECT_EQ(match(verbatim, g, 0.5).rank, (std::vector<std::size_t>{1, 2}));
  auto shifted = verbatim;
  // 40x40 box moved 25 right: overlap 15x40 = 600, union 2600, IoU ~0.23.
  shifted[0].sbox = {25, 0, 65, 40};
  EXPECT_LT(iou(shifted[0].sbox, g.entities[0].box), 0.5);
  EXPECT_EQ(match(shifted, g, 0.5).rank, (std::vector<std::size_t>{0, 2}));
  auto dup = verbatim;
  dup.insert(dup.begin(), verbatim[0]);
  EXPECT_EQ(match(dup, g, 0.5).rank, (std::vector<std::size_t>{1, 3}));
}

TEST(RankTriplets, CountsUnderGraphConstraint) {
  ProtocolConfig cfg;
  cfg.calibrate_inference = false;
  RankInput in = uniform_input(2, 5);
  EXPECT_EQ(rank_triplets(in, cfg).size(), 2u);
  cfg.graph_constraint = false;
  EXPECT_EQ(rank_triplets(in, cfg).size(), 10u);
  cfg.graph_constraint = true;
  EXPECT_EQ(rank_triplets(uniform_input(6, 3), cfg).size(), 30u);
}

TEST(RankTriplets, TieOrderIsPairThenPredicate) {
  ProtocolConfig cfg;
  cfg.calibrate_inference = false;
  cfg.graph_constraint = false;
  const auto out = rank_triplets(uniform_input(3, 2), cfg);
  ASSERT_EQ(out.size(), 12u);
  const auto pairs = ordered_pairs(3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i].subj, pairs[i / 2].first);
    EXPECT_EQ(out[i].obj, pairs[i / 2].second);
    EXPECT_EQ(out[i].pred, i % 2);
    EXPECT_DOUBLE_EQ(out[i].score, 1.0 / 3.0);
  }
  cfg.graph_constraint = true;
  const auto one = rank_triplets(uniform_input(3, 2), cfg);
  for (const auto& t : one) EXPECT_EQ(t.pred, 0u);
}

TEST(RankTriplets, MatchesDirectScoreConstruction) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 4, C = 4;
    RankInput in = uniform_input(n, C - 1);
    for (auto& v : in.predicate_logits.values()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
    for (auto& s : in.label_scores) s = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
    ProtocolConfig cfg;
    cfg.calibrate_inference = false;
    cfg.graph_constraint = rng() % 2;
    struct Cand {
      double score;
      std::size_t pair, c;
    };
    std::vector<Cand> want;
    for (std::size_t k = 0; k < in.pairs.size(); ++k) {
      const Tensor prob = softmax_rows(Tensor({1, C}, std::vector<double>(in.predicate_logits.row(k).begin(),
                                                                          in.predicate_logits.row(k).end())));
      const double ps = in.label_scores[in.pairs[k].first] * in.label_scores[in.pairs[k].second];
      std::size_t best = 1;
      for (std::size_t c = 1; c < C; ++c) {
        if (cfg.graph_constraint) {
          if (prob[c] > prob[best]) best = c;
        } else {
          want.push_back({ps * prob[c], k, c});
        }
      }
      if (cfg.graph_constraint) want.push_back({ps * prob[best], k, best});
    }
    std::sort(want.begin(), want.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.pair != b.pair ? a.pair < b.pair : a.c < b.c;
    });
    const auto got = rank_triplets(in, cfg);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].score, want[i].score);
      EXPECT_EQ(got[i].subj, in.pairs[want[i].pair].first);
      EXPECT_EQ(got[i].pred, want[i].c - 1);
      if (i > 0) { EXPECT_GE(got[i - 1].score, got[i].score); }
    }
  }
}

TEST(RankTriplets, CalibrationOffIgnoresMargins) {
  std::mt19937_64 rng(44);
  const CalibrationSpace a(2, {{0, 0, 1}}, {{0, 1, 1}, {1, 0, 0}}, AlphaTable{});
  const CalibrationSpace b(2, {{1, 1, 1}}, {{0, 0, 0}}, AlphaTable{});
  for (int trial = 0; trial < 50; ++trial) {
    RankInput in = uniform_input(4, 2);
    for (auto& v : in.predicate_logits.values()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
    ProtocolConfig cfg;
    cfg.calibrate_inference = false;
    const auto x = rank_triplets(in, cfg, &a), y = rank_triplets(in, cfg, &b), z = rank_triplets(in, cfg);
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_TRUE(same_prediction(x[i], y[i]));
      EXPECT_TRUE(same_prediction(x[i], z[i]));
    }
  }
}

TEST(RankTriplets, CalibrationPromotesKeptUnseen) {
  // Labels alternate 0,1; pair (0,1) has p1 kept unseen, so equal logits pick p1.
  const CalibrationSpace sp(2, {{0, 0, 1}}, {{0, 1, 1}}, AlphaTable{});
  ProtocolConfig cfg;
  const auto out = rank_triplets(uniform_input(2, 2), cfg, &sp);
  const auto it = std::find_if(out.begin(), out.end(), [](const auto& t) { return t.subj == 0; });
  ASSERT_NE(it, out.end());
  EXPECT_EQ(it->pred, 1u);
  const double e = std::exp(1.0), em = std::exp(-1.0);
  EXPECT_DOUBLE_EQ(it->score, e / (e + 2 * em));
  EXPECT_THROW(rank_triplets(uniform_input(2, 2), cfg), std::invalid_argument);
}

TEST(RankTriplets, FrequencyBiasAddsLogRow) {
  Dataset train;
  train.entity_classes = {"a", "b"};
  train.predicate_classes = {"p", "q"};
  SceneGraph g;
  g.width = g.height = 10;
  g.entities = {{{0, 0, 1, 1}, 0}, {{2, 2, 3, 3}, 1}};
  g.relations = {{0, 1, 1}, {0, 1, 1}};
  train.graphs = {g};
  const FrequencyBias fb(train);
  ProtocolConfig cfg;
  cfg.calibrate_inference = false;
  cfg.use_freq_bias = true;
  RankInput in = uniform_input(2, 2);
  const auto out = rank_triplets(in, cfg, nullptr, &fb);
  const auto row = fb.row(0, 1);
  const auto it = std::find_if(out.begin(), out.end(), [](const auto& t) { return t.subj == 0; });
  EXPECT_EQ(it->pred, 1u);
  double z = 0;
  for (double f : row) z += f;
  EXPECT_NEAR(it->score, row[2] / z, 1e-15);
  EXPECT_THROW(rank_triplets(in, cfg), std::invalid_argument);
}

TEST(RankTriplets, RejectsMissingLogits) {
  RankInput in = uniform_input(3, 2);
  in.predicate_logits = Tensor({5, 3}, 0.0);
  ProtocolConfig cfg;
  cfg.calibrate_inference = false;
  EXPECT_THROW(rank_triplets(in, cfg), std::invalid_argument);
}

TEST(RelationalNms, Examples) {
  const SceneGraph g = two_relation_image();
  const auto t = pred_for(g, g.relations[0], 0.9);
  auto dup = t;
  dup.score = 0.5;
  EXPECT_EQ(relational_nms({t, dup}, 0.5).size(), 1u);
  auto far = dup;
  far.sbox = {60, 0, 90, 30};
  EXPECT_EQ(relational_nms({t, far}, 0.5).size(), 2u);
  auto other = dup;
  other.pred = 2;
  EXPECT_EQ(relational_nms({t, other}, 0.5).size(), 2u);
}

TEST(PerPredicate, SinglePredicateEqualsOverall) {
  std::mt19937_64 rng(45);
  SceneGraph g = random_graph(rng, 1);
  for (auto& r : g.relations) r.pred = 0;
  std::sort(g.relations.begin(), g.relations.end());
  g.relations.erase(std::unique(g.relations.begin(), g.relations.end()), g.relations.end());
  if (g.relations.empty()) g.relations.push_back({0, 1, 0});
  TripletSet unseen;
  for (const auto& r : g.relations) unseen.insert(triplet_of(g, r));
  const std::vector<ImageMatch> m{match(random_predictions(g, rng, false, false), g, 0.5)};
  const auto per = per_predicate_zr(m, unseen, 5, {});
  ASSERT_EQ(per.size(), 1u);
  EXPECT_EQ(per[0].recall.value, zero_shot_recall_at_k(m, unseen, 5).value);
  EXPECT_TRUE(per_predicate_zr(m, {}, 5, {}).empty());
}

TEST(PredictionDump, RoundTripAndErrors) {
  const SceneGraph g = two_relation_image();
  std::vector<ImagePredictions> ims{{7, {pred_for(g, g.relations[0], 0.123456789012345678), pred_for(g, g.relations[1], 1e-300)}},
                                    {9, {}}};
  ims[0].triplets[0].sbox = {0.1, 0.2, 33.333333333333336, 40};
  std::stringstream ss;
  write_predictions(ss, ims);
  const auto back = read_predictions(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image_id, 7u);
  EXPECT_EQ(back[1].triplets.size(), 0u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto &a = ims[0].triplets[i], &b = back[0].triplets[i];
    EXPECT_EQ(a.sbox, b.sbox);
    EXPECT_EQ(a.obox, b.obox);
    EXPECT_EQ(a.score, b.score);
    EXPECT_EQ(a.pred, b.pred);
    EXPECT_EQ(a.slabel, b.slabel);
    EXPECT_EQ(a.olabel, b.olabel);
  }
  std::istringstream unsorted(
      "{\"image_id\":1,\"triplets\":[]}\n"
      "{\"image_id\":2,\"triplets\":[{\"sbox\":[0,0,1,1],\"slabel\":0,\"pred\":0,\"obox\":[0,0,1,1],\"olabel\":0,"
      "\"score\":0.1},{\"sbox\":[0,0,1,1],\"slabel\":0,\"pred\":0,\"obox\":[0,0,1,1],\"olabel\":0,\"score\":0.2}]}\n");
  try {
    read_predictions(unsorted);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::istringstream broken("{\"image_id\":1,\"triplets\":[{\"sbox\":[0,0,1]}]}\n");
  EXPECT_THROW(read_predictions(broken), DataError);
}

TEST(MetricsCsv, LayoutAndAbsentValues) {
  const SceneGraph g = two_relation_image();
  const std::vector<ImageMatch> m{match({pred_for(g, g.relations[0], 1.0)}, g, 0.5)};
  ProtocolConfig cfg;
  cfg.ks = {1, 2};
  const auto rows = compute_metrics(m, {}, cfg);
  std::ostringstream os;
  write_metrics_csv(os, rows);
  EXPECT_EQ(os.str(),
            "task,graph_constraint,freq_bias,overlap_filter,calibrated,metric,K,value,contributing_images\n"
            "predcls,1,0,0,1,R,1,0.5,1\n"
            "predcls,1,0,0,1,R,2,0.5,1\n"
            "predcls,1,0,0,1,zR,1,NA,0\n"
            "predcls,1,0,0,1,zR,2,NA,0\n");
  EXPECT_EQ(find_metric(rows, "R", 2)->value, 0.5);
  EXPECT_EQ(find_metric(rows, "R", 3), nullptr);
}

TEST(ProtocolConfig, Validation) {
  ProtocolConfig c;
  EXPECT_NO_THROW(validate_protocol(c));
  c.ks = {50, 20};
  EXPECT_THROW(validate_protocol(c), std::invalid_argument);
  c.ks = {};
  EXPECT_THROW(validate_protocol(c), std::invalid_argument);
  c = ProtocolConfig{};
  c.iou_threshold = 0.0;
  EXPECT_THROW(validate_protocol(c), std::invalid_argument);
  const auto j = nlohmann::json::parse(R"({"mode":"sgdet","ks":[10]})");
  const auto p = j.get<ProtocolConfig>();
  EXPECT_EQ(p.mode, TaskMode::sgdet);
  EXPECT_EQ(p.ks, (std::vector<std::uint32_t>{10}));
  EXPECT_TRUE(p.graph_constraint);
}

TEST(PseudoDetections, NoiseFreeIsIdentityAndSeeded) {
  std::mt19937_64 rng(46);
  const SceneGraph g = random_graph(rng, 3);
  std::mt19937_64 r1(5), r2(5);
  const auto a = jitter_boxes(g, 0.0, r1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], g.entities[i].box);
  std::mt19937_64 r3(6), r4(6);
  EXPECT_EQ(jitter_boxes(g, 0.1, r3), jitter_boxes(g, 0.1, r4));
  std::vector<std::uint32_t> labels{0, 1, 2, 0, 1}, same = labels;
  apply_label_noise(same, 0.0, 3, r1);
  EXPECT_EQ(same, labels);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hit(1000, 0);
  parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i] += 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 1000);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}
