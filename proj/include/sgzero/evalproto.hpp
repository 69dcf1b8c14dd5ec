#pragma once

// Zero-shot evaluation protocol: triplet ranking, relational NMS, greedy GT
// matching, R@K / zR@K, per-predicate zR, prediction dumps and metric reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgzero/bbox.hpp"
#include "sgzero/sgdata.hpp"
#include "sgzero/tcl.hpp"
#include "sgzero/tensor.hpp"

namespace sgz {

enum class TaskMode { predcls, sgcls, sgdet };

NLOHMANN_JSON_SERIALIZE_ENUM(TaskMode, {{TaskMode::predcls, "predcls"},
                                        {TaskMode::sgcls, "sgcls"},
                                        {TaskMode::sgdet, "sgdet"}})

inline std::string to_string(TaskMode m) { return nlohmann::json(m).get<std::string>(); }

struct ProtocolConfig {
  bool graph_constraint = true;
  bool use_freq_bias = false;
  bool object_overlap_filter = false;
  std::vector<std::uint32_t> ks = {20, 50, 100};
  double iou_threshold = 0.5;
  TaskMode mode = TaskMode::predcls;
  bool calibrate_inference = true;
  bool relational_nms = true;
  double sgdet_box_noise = 0.05;    // jitter, fraction of box size
  double sgdet_label_noise = 0.1;   // probability a detected label is replaced
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProtocolConfig, graph_constraint, use_freq_bias,
                                                object_overlap_filter, ks, iou_threshold, mode,
                                                calibrate_inference, relational_nms, sgdet_box_noise,
                                                sgdet_label_noise)

inline void validate_protocol(const ProtocolConfig& c) {
  if (c.ks.empty()) throw std::invalid_argument("protocol: K list is empty");
  for (std::size_t i = 0; i < c.ks.size(); ++i) {
    if (c.ks[i] == 0) throw std::invalid_argument("protocol: K must be positive");
    if (i > 0 && c.ks[i] <= c.ks[i - 1]) throw std::invalid_argument("protocol: K list must be strictly ascending");
  }
  if (!(c.iou_threshold > 0.0 && c.iou_threshold <= 1.0)) throw std::invalid_argument("protocol: IoU threshold must be in (0, 1]");
  if (c.sgdet_label_noise < 0.0 || c.sgdet_label_noise > 1.0) throw std::invalid_argument("protocol: label noise must be in [0, 1]");
  if (c.sgdet_box_noise < 0.0) throw std::invalid_argument("protocol: box noise must be >= 0");
}

struct TripletPrediction {
  BBox sbox;
  std::uint32_t slabel = 0;
  std::uint32_t pred = 0;
  BBox obox;
  std::uint32_t olabel = 0;
  double score = 0.0;
  std::uint32_t subj = 0;  // entity indices; not part of the dump format
  std::uint32_t obj = 0;
};

struct ImagePredictions {
  std::uint64_t image_id = 0;
  std::vector<TripletPrediction> triplets;
};

/// Everything rank_triplets needs for one image.
struct RankInput {
  std::vector<BBox> boxes;
  std::vector<std::uint32_t> labels;
  std::vector<double> label_scores;  // p(label) per entity; all 1 in PredCls
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  Tensor predicate_logits;  // pairs x (|C_p| + 1)
};

/// Ranked triplet candidates. Scores are p_s * p_o * p_pred, with p_pred from a
/// softmax over the (optionally biased and calibrated) predicate logits.
/// Background never ranks. Ties keep pair order, then predicate order.
inline std::vector<TripletPrediction> rank_triplets(const RankInput& in, const ProtocolConfig& cfg,
                                                    const CalibrationSpace* calib = nullptr,
                                                    const FrequencyBias* freq = nullptr) {
  const std::size_t P = in.pairs.size();
  if (in.predicate_logits.rows() != P || (P > 0 && in.predicate_logits.rank() != 2)) {
    throw std::invalid_argument("rank_triplets: expected one logit row per pair (" + std::to_string(P) +
                                "), got " + std::to_string(in.predicate_logits.rows()));
  }
  if (in.labels.size() != in.boxes.size() || in.label_scores.size() != in.boxes.size()) {
    throw std::invalid_argument("rank_triplets: boxes, labels and label scores differ in length");
  }
  if (cfg.calibrate_inference && !calib) throw std::invalid_argument("rank_triplets: calibration requested without margins");
  if (cfg.use_freq_bias && !freq) throw std::invalid_argument("rank_triplets: frequency bias requested without a table");
  const std::size_t C = P ? in.predicate_logits.cols() : 0;

  std::vector<TripletPrediction> out;
  std::vector<double> row(C);
  for (std::size_t k = 0; k < P; ++k) {
    const auto [s, o] = in.pairs[k];
    if (s >= in.boxes.size() || o >= in.boxes.size()) throw std::out_of_range("rank_triplets: pair index out of range");
    const std::uint32_t ls = in.labels[s], lo = in.labels[o];
    for (std::size_t c = 0; c < C; ++c) row[c] = in.predicate_logits(k, c);
    if (cfg.use_freq_bias) {
      const auto f = freq->row(ls, lo);
      if (f.size() != C) throw std::invalid_argument("rank_triplets: frequency table width mismatch");
      for (std::size_t c = 0; c < C; ++c) row[c] += std::log(f[c]);
    }
    if (cfg.calibrate_inference) {
      const auto m = calib->inference_margins(ls, lo);
      if (m.size() != C) throw std::invalid_argument("rank_triplets: margin width mismatch");
      for (std::size_t c = 0; c < C; ++c) row[c] += m[c];
    }
    const Tensor prob = softmax_rows(Tensor({1, C}, row));
    const double pair_score = in.label_scores[s] * in.label_scores[o];
    auto emit = [&](std::size_t c) {
      out.push_back({in.boxes[s], ls, static_cast<std::uint32_t>(c - 1), in.boxes[o], lo, pair_score * prob[c], s, o});
    };
    if (cfg.graph_constraint) {
      std::size_t best = 1;
      for (std::size_t c = 2; c < C; ++c)
        if (prob[c] > prob[best]) best = c;
      if (C > 1) emit(best);
    } else {
      for (std::size_t c = 1; c < C; ++c) emit(c);
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const TripletPrediction& a, const TripletPrediction& b) { return a.score > b.score; });
  return out;
}

/// Greedy suppression in rank order of candidates whose labels equal a kept
/// candidate's and whose subject and object boxes both overlap it at >= iou.
inline std::vector<TripletPrediction> relational_nms(const std::vector<TripletPrediction>& ranked, double iou_threshold) {
  std::vector<TripletPrediction> kept;
  for (const auto& t : ranked) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.slabel == t.slabel && k.pred == t.pred && k.olabel == t.olabel && iou(k.sbox, t.sbox) >= iou_threshold &&
          iou(k.obox, t.obox) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(t);
  }
  return kept;
}

/// Per-image match record: for each GT relation, its 1-based matching rank,
/// or 0 when no prediction matched it.
struct ImageMatch {
  std::uint64_t image_id = 0;
  std::vector<TripletKey> gt;
  std::vector<std::size_t> rank;
};

inline ImageMatch match(const std::vector<TripletPrediction>& ranked, const SceneGraph& g, double iou_threshold) {
  ImageMatch m;
  m.image_id = g.image_id;
  for (const auto& r : g.relations) m.gt.push_back(triplet_of(g, r));
  m.rank.assign(g.relations.size(), 0);
  std::size_t open = g.relations.size();
  for (std::size_t i = 0; i < ranked.size() && open > 0; ++i) {
    const auto& t = ranked[i];
    for (std::size_t j = 0; j < g.relations.size(); ++j) {
      if (m.rank[j]) continue;
      const auto& r = g.relations[j];
      if (m.gt[j] != TripletKey{t.slabel, t.pred, t.olabel}) continue;
      if (iou(t.sbox, g.entities[r.subj].box) < iou_threshold) continue;
      if (iou(t.obox, g.entities[r.obj].box) < iou_threshold) continue;
      m.rank[j] = i + 1;
      --open;
      break;
    }
  }
  return m;
}

/// Mean of per-image fractions. `value` is empty when no image is eligible.
struct RecallResult {
  std::optional<double> value;
  std::size_t contributing_images = 0;
  std::size_t hits = 0;       // matched GT relations over eligible images
  std::size_t gt_total = 0;   // GT relations over eligible images
};

namespace detail {
template <class Keep>
RecallResult recall_impl(const std::vector<ImageMatch>& matches, std::size_t k, Keep keep) {
  RecallResult out;
  double sum = 0.0;
  for (const auto& m : matches) {
    std::size_t total = 0, hit = 0;
    for (std::size_t j = 0; j < m.gt.size(); ++j) {
      if (!keep(m.gt[j])) continue;
      ++total;
      if (m.rank[j] != 0 && m.rank[j] <= k) ++hit;
    }
    if (total == 0) continue;
    sum += static_cast<double>(hit) / static_cast<double>(total);
    ++out.contributing_images;
    out.hits += hit;
    out.gt_total += total;
  }
  if (out.contributing_images) out.value = sum / static_cast<double>(out.contributing_images);
  return out;
}
}  // namespace detail

inline RecallResult recall_at_k(const std::vector<ImageMatch>& matches, std::size_t k) {
  return detail::recall_impl(matches, k, [](const TripletKey&) { return true; });
}

/// Restricted to GT relations whose key is unseen; images without one are skipped.
inline RecallResult zero_shot_recall_at_k(const std::vector<ImageMatch>& matches, const TripletSet& unseen,
                                          std::size_t k) {
  return detail::recall_impl(matches, k, [&](const TripletKey& t) { return unseen.count(t) != 0; });
}

struct PredicateRecall {
  std::uint32_t predicate = 0;
  std::size_t train_count = 0;
  RecallResult recall;
};

/// zR@K per predicate class, most frequent training predicate first. Classes
/// with no unseen GT relation are omitted.
inline std::vector<PredicateRecall> per_predicate_zr(const std::vector<ImageMatch>& matches, const TripletSet& unseen,
                                                     std::size_t k, const std::vector<std::size_t>& train_counts) {
  std::set<std::uint32_t> preds;
  for (const auto& m : matches)
    for (const auto& t : m.gt)
      if (unseen.count(t)) preds.insert(t.p);
  std::vector<PredicateRecall> out;
  for (auto p : preds) {
    PredicateRecall pr;
    pr.predicate = p;
    pr.train_count = p < train_counts.size() ? train_counts[p] : 0;
    pr.recall = detail::recall_impl(matches, k, [&](const TripletKey& t) { return t.p == p && unseen.count(t) != 0; });
    out.push_back(pr);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const PredicateRecall& a, const PredicateRecall& b) { return a.train_count > b.train_count; });
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-detections for SGDet

template <class Rng>
std::vector<BBox> jitter_boxes(const SceneGraph& g, double noise, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<BBox> out;
  for (const auto& e : g.entities) {
    const double w = e.box.width(), h = e.box.height();
    BBox b{e.box.x1 + noise * w * u(rng), e.box.y1 + noise * h * u(rng), e.box.x2 + noise * w * u(rng),
           e.box.y2 + noise * h * u(rng)};
    b = clamp_to_image(b, g.width, g.height);
    out.push_back(b.valid() ? b : e.box);
  }
  return out;
}

/// Replaces each label with a uniformly drawn class with probability `rate`.
template <class Rng>
void apply_label_noise(std::vector<std::uint32_t>& labels, double rate, std::size_t num_classes, Rng& rng) {
  std::bernoulli_distribution flip(rate);
  std::uniform_int_distribution<std::uint32_t> cls(0, static_cast<std::uint32_t>(num_classes - 1));
  for (auto& l : labels) {
    const bool f = flip(rng);
    const std::uint32_t c = cls(rng);
    if (f) l = c;
  }
}

// ---------------------------------------------------------------------------
// Prediction dumps (JSON lines)

inline nlohmann::json box_json(const BBox& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

inline BBox box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("prediction dump: box must be [x1, y1, x2, y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline void write_predictions(std::ostream& os, const std::vector<ImagePredictions>& images) {
  for (const auto& im : images) {
    nlohmann::json j;
    j["image_id"] = im.image_id;
    j["triplets"] = nlohmann::json::array();
    for (const auto& t : im.triplets) {
      j["triplets"].push_back({{"sbox", box_json(t.sbox)},
                               {"slabel", t.slabel},
                               {"pred", t.pred},
                               {"obox", box_json(t.obox)},
                               {"olabel", t.olabel},
                               {"score", t.score}});
    }
    os << j.dump() << '\n';
  }
}

inline std::vector<ImagePredictions> read_predictions(std::istream& is) {
  std::vector<ImagePredictions> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImagePredictions im;
      im.image_id = j.at("image_id").get<std::uint64_t>();
      double prev = std::numeric_limits<double>::infinity();
      for (const auto& t : j.at("triplets")) {
        TripletPrediction p;
        p.sbox = box_from_json(t.at("sbox"));
        p.slabel = t.at("slabel").get<std::uint32_t>();
        p.pred = t.at("pred").get<std::uint32_t>();
        p.obox = box_from_json(t.at("obox"));
        p.olabel = t.at("olabel").get<std::uint32_t>();
        p.score = t.at("score").get<double>();
        if (p.score > prev) throw DataError("triplets must be sorted by non-increasing score");
        prev = p.score;
        im.triplets.push_back(p);
      }
      out.push_back(std::move(im));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("prediction dump line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("prediction dump line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metric report

struct MetricRow {
  std::string task;
  bool graph_constraint = true;
  bool freq_bias = false;
  bool overlap_filter = false;
  bool calibrated = true;
  std::string metric;  // "R" or "zR"
  std::size_t k = 0;
  std::optional<double> value;
  std::size_t contributing_images = 0;
};

inline std::vector<MetricRow> compute_metrics(const std::vector<ImageMatch>& matches, const TripletSet& unseen,
                                              const ProtocolConfig& cfg) {
  std::vector<MetricRow> rows;
  auto base = [&] {
    MetricRow r;
    r.task = to_string(cfg.mode);
    r.graph_constraint = cfg.graph_constraint;
    r.freq_bias = cfg.use_freq_bias;
    r.overlap_filter = cfg.object_overlap_filter;
    r.calibrated = cfg.calibrate_inference;
    return r;
  };
  for (const char* metric : {"R", "zR"}) {
    for (auto k : cfg.ks) {
      MetricRow r = base();
      r.metric = metric;
      r.k = k;
      const RecallResult rr = r.metric == "R" ? recall_at_k(matches, k) : zero_shot_recall_at_k(matches, unseen, k);
      r.value = rr.value;
      r.contributing_images = rr.contributing_images;
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "task,graph_constraint,freq_bias,overlap_filter,calibrated,metric,K,value,contributing_images\n";
  for (const auto& r : rows) {
    os << r.task << ',' << r.graph_constraint << ',' << r.freq_bias << ',' << r.overlap_filter << ',' << r.calibrated
       << ',' << r.metric << ',' << r.k << ',' << (r.value ? format_double(*r.value) : "NA") << ','
       << r.contributing_images << '\n';
  }
}

inline const MetricRow* find_metric(const std::vector<MetricRow>& rows, const std::string& metric, std::size_t k) {
  for (const auto& r : rows)
    if (r.metric == metric && r.k == k) return &r;
  return nullptr;
}

// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is handled
/// exactly once, so results written to slot i are independent of scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace sgz
