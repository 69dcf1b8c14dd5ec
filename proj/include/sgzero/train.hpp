#pragma once

// Training loop for the contextual encoding network with the calibrated loss,
// checkpoint/resume, and per-image inference feeding the evaluation protocol.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgzero/cen.hpp"
#include "sgzero/evalproto.hpp"
#include "sgzero/rng.hpp"
#include "sgzero/tcl.hpp"

namespace sgz {

struct TrainConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  std::uint32_t batch_images = 4;
  std::uint32_t iterations = 2000;
  std::uint32_t decay_at = 1250;
  double decay_factor = 10.0;
  std::uint64_t seed = 0;
  double bg_ratio = 3.0;
  TclConfig tcl;
  TaskMode task = TaskMode::predcls;
  double grad_clip = 5.0;  // global norm; 0 disables
  double entity_loss_weight = 1.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, momentum, batch_images, iterations, decay_at,
                                                decay_factor, seed, bg_ratio, tcl, task, grad_clip,
                                                entity_loss_weight)

inline void validate_train_config(const TrainConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(c.lr > 0.0)) fail("lr must be > 0");
  if (c.iterations > 0 && c.decay_at >= c.iterations) fail("decay_at must be < iterations");
  if (!(c.decay_factor > 0.0)) fail("decay_factor must be > 0");
  if (c.batch_images == 0) fail("batch_images must be >= 1");
  if (c.bg_ratio < 0.0) fail("bg_ratio must be >= 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (c.tcl.lambda < 0.0) fail("lambda must be >= 0");
  if (c.grad_clip < 0.0) fail("grad_clip must be >= 0");
}

inline double lr_at(const TrainConfig& c, std::uint32_t iteration) {
  return iteration < c.decay_at ? c.lr : c.lr / c.decay_factor;
}

struct IterationRecord {
  std::uint32_t iteration = 0;
  double lr = 0.0;
  double ce = 0.0;
  double cal = 0.0;    // mean over images with an eligible pair; 0 when none
  double total = 0.0;
  double clamp_active_fraction = 0.0;  // 1 when gradient clipping fired
};

struct RunRecord {
  std::vector<IterationRecord> iterations;
  friend bool operator==(const RunRecord& a, const RunRecord& b) {
    if (a.iterations.size() != b.iterations.size()) return false;
    for (std::size_t i = 0; i < a.iterations.size(); ++i) {
      const auto &x = a.iterations[i], &y = b.iterations[i];
      if (x.iteration != y.iteration || x.lr != y.lr || x.ce != y.ce || x.cal != y.cal || x.total != y.total ||
          x.clamp_active_fraction != y.clamp_active_fraction)
        return false;
    }
    return true;
  }
};

inline void write_run_csv(std::ostream& os, const RunRecord& r) {
  os << "iteration,lr,ce_loss,cal_loss,clamp_active_fraction\n";
  for (const auto& it : r.iterations) {
    os << it.iteration << ',' << format_double(it.lr) << ',' << format_double(it.ce) << ',' << format_double(it.cal)
       << ',' << format_double(it.clamp_active_fraction) << '\n';
  }
}

/// Parameters, momentum buffers and the next iteration index.
struct TrainState {
  ParamStore params;
  ParamStore velocity;
  std::uint32_t iteration = 0;
};

inline constexpr const char* kVelocityPrefix = "opt.velocity/";
inline constexpr const char* kIterationKey = "opt.iteration";

inline TrainState init_train_state(const CenConfig& cen, std::uint64_t seed) {
  auto rng = stream(seed, 0);
  TrainState st;
  st.params = init_cen_params(cen, rng);
  for (const auto& [name, t] : st.params) st.velocity.add(name, Tensor::zeros_like(t));
  return st;
}

inline ParamStore pack_train_state(const TrainState& st) {
  ParamStore out;
  for (const auto& [name, t] : st.params) out.add(name, t);
  for (const auto& [name, t] : st.velocity) out.add(kVelocityPrefix + name, t);
  out.add(kIterationKey, Tensor::scalar(static_cast<double>(st.iteration)));
  return out;
}

/// Accepts both full training states and parameter-only checkpoints.
inline TrainState unpack_train_state(const ParamStore& packed) {
  TrainState st;
  const std::string vp = kVelocityPrefix;
  for (const auto& [name, t] : packed) {
    if (name == kIterationKey) {
      st.iteration = static_cast<std::uint32_t>(t.item());
    } else if (name.rfind(vp, 0) == 0) {
      st.velocity.add(name.substr(vp.size()), t);
    } else {
      st.params.add(name, t);
    }
  }
  if (st.velocity.size() == 0) {
    for (const auto& [name, t] : st.params) st.velocity.add(name, Tensor::zeros_like(t));
  }
  return st;
}

namespace detail {

inline std::size_t pair_index(std::uint32_t s, std::uint32_t o, std::size_t n) {
  return s * (n - 1) + (o < s ? o : o - 1);
}

/// Annotated pairs plus up to bg_ratio x max(fg, 1) background pairs.
template <class Rng>
std::vector<PairSample> sample_pairs(const SceneGraph& g, double bg_ratio, Rng& rng) {
  const std::size_t n = g.entities.size();
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> annotated;
  for (const auto& r : g.relations) annotated[{r.subj, r.obj}].push_back(r.pred);
  std::vector<PairSample> out;
  for (const auto& [pair, preds] : annotated) {
    std::uniform_int_distribution<std::size_t> pick(0, preds.size() - 1);
    const std::uint32_t p = preds[preds.size() == 1 ? 0 : pick(rng)];
    out.push_back({pair_index(pair.first, pair.second, n), logit_index(p), g.entities[pair.first].label,
                   g.entities[pair.second].label});
  }
  std::vector<PairSample> bg;
  for (std::uint32_t s = 0; s < n; ++s)
    for (std::uint32_t o = 0; o < n; ++o)
      if (s != o && !annotated.count({s, o}))
        bg.push_back({pair_index(s, o, n), kBackground, g.entities[s].label, g.entities[o].label});
  std::shuffle(bg.begin(), bg.end(), rng);
  const auto want = static_cast<std::size_t>(std::ceil(bg_ratio * static_cast<double>(std::max<std::size_t>(out.size(), 1))));
  bg.resize(std::min(bg.size(), want));
  out.insert(out.end(), bg.begin(), bg.end());
  std::sort(out.begin(), out.end(), [](const PairSample& a, const PairSample& b) { return a.row < b.row; });
  return out;
}

inline Var entity_ce(Var entity_logits, const SceneGraph& g) {
  std::vector<std::size_t> labels;
  for (const auto& e : g.entities) labels.push_back(e.label);
  return scale(mean(select_per_row(log_softmax(entity_logits), labels)), -1.0);
}

}  // namespace detail

struct TrainData {
  const Dataset& train;
  const FeatureStore& features;
  const CalibrationSpace& space;
  const CenConfig& cen;
};

/// Advances `st` until st.iteration == until. Each iteration draws its batch
/// from a generator keyed by (seed, iteration), so resuming is exact.
inline void train_until(TrainState& st, const TrainData& d, const TrainConfig& cfg, RunRecord& record,
                        std::uint32_t until) {
  validate_train_config(cfg);
  validate_cen_config(d.cen);
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < d.train.graphs.size(); ++i)
    if (d.train.graphs[i].entities.size() >= 2) usable.push_back(i);
  if (usable.empty() && until > st.iteration) throw std::invalid_argument("train: no image has two entities");

  std::vector<CenInput> inputs(d.train.graphs.size());
  std::vector<bool> built(d.train.graphs.size(), false);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_images);

  for (; st.iteration < until; ++st.iteration) {
    const std::uint32_t it = st.iteration;
    auto rng = stream(cfg.seed, 1000 + static_cast<std::uint64_t>(it));
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    ParamStore grads;
    for (const auto& [name, t] : st.params) grads.add(name, Tensor::zeros_like(t));
    IterationRecord rec;
    rec.iteration = it;
    rec.lr = lr_at(cfg, it);
    std::size_t cal_images = 0;
    try {
      for (std::uint32_t b = 0; b < cfg.batch_images; ++b) {
        const std::size_t gi = usable[pick(rng)];
        const SceneGraph& g = d.train.graphs[gi];
        if (!built[gi]) {
          inputs[gi] = build_cen_input(g, d.features);
          built[gi] = true;
        }
        const auto batch = detail::sample_pairs(g, cfg.bg_ratio, rng);
        Graph graph;
        BoundParams p(graph, st.params);
        const CenOutput out = cen_forward(graph, p, d.cen, inputs[gi], d.cen.dropout > 0 ? &rng : nullptr);
        const TotalLoss tl = total_loss(out.logits.predicate_logits, batch, d.space, cfg.tcl);
        Var loss = tl.total;
        if (cfg.task != TaskMode::predcls && cfg.entity_loss_weight > 0.0) {
          loss = add(loss, scale(detail::entity_ce(out.logits.entity_logits, g), cfg.entity_loss_weight));
        }
        graph.backward(scale(loss, inv_b));
        for (auto& [name, gt] : grads) {
          const Tensor& pg = p[name].grad();
          for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += pg[i];
        }
        rec.ce += tl.ce.value().item() * inv_b;
        rec.total += loss.value().item() * inv_b;
        if (tl.cal) {
          rec.cal += tl.cal->value().item();
          ++cal_images;
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite value at iteration " + std::to_string(it) + ": " + e.what());
    }
    if (cal_images) rec.cal /= static_cast<double>(cal_images);
    if (!std::isfinite(rec.total)) throw NumericError("train: non-finite loss at iteration " + std::to_string(it));

    double norm2 = 0.0;
    for (const auto& [_, gt] : grads)
      for (double v : gt.values()) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    double factor = 1.0;
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      factor = cfg.grad_clip / norm;
      rec.clamp_active_fraction = 1.0;
    }
    for (auto& [name, t] : st.params) {
      Tensor& v = st.velocity.at(name);
      const Tensor& gt = grads.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) {
        v[i] = cfg.momentum * v[i] + factor * gt[i];
        t[i] -= rec.lr * v[i];
      }
    }
    record.iterations.push_back(rec);
  }
}

inline TrainState train(const TrainData& d, const TrainConfig& cfg, RunRecord& record) {
  TrainState st = init_train_state(d.cen, cfg.seed);
  train_until(st, d, cfg, record, cfg.iterations);
  return st;
}

// ---------------------------------------------------------------------------
// Inference

struct InferenceContext {
  const CenConfig& cen;
  const ParamStore& params;
  const ProtocolConfig& protocol;
  const CalibrationSpace* space = nullptr;
  const FrequencyBias* freq = nullptr;
  std::uint64_t seed = 0;  // pseudo-detection noise
};

inline ImagePredictions predict_image(const SceneGraph& g, const FeatureStore& fs, const InferenceContext& ctx) {
  ImagePredictions out;
  out.image_id = g.image_id;
  if (g.entities.size() < 2) return out;
  auto rng = stream(ctx.seed, 0x5d000000ull + g.image_id);
  std::vector<BBox> boxes;
  if (ctx.protocol.mode == TaskMode::sgdet) boxes = jitter_boxes(g, ctx.protocol.sgdet_box_noise, rng);
  const CenInput in = build_cen_input(g, fs, boxes);
  Graph graph;
  BoundParams p(graph, ctx.params);
  const CenOutput o = cen_forward(graph, p, ctx.cen, in);

  RankInput ri;
  ri.pairs = in.pairs;
  ri.predicate_logits = o.logits.predicate_logits.value();
  for (std::size_t i = 0; i < g.entities.size(); ++i) ri.boxes.push_back(boxes.empty() ? g.entities[i].box : boxes[i]);
  if (ctx.protocol.mode == TaskMode::predcls) {
    for (const auto& e : g.entities) ri.labels.push_back(e.label);
    ri.label_scores.assign(g.entities.size(), 1.0);
  } else {
    const Tensor prob = softmax_rows(o.logits.entity_logits.value());
    for (std::size_t i = 0; i < prob.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < prob.cols(); ++c)
        if (prob(i, c) > prob(i, best)) best = c;
      ri.labels.push_back(static_cast<std::uint32_t>(best));
      ri.label_scores.push_back(prob(i, best));
    }
    if (ctx.protocol.mode == TaskMode::sgdet) {
      apply_label_noise(ri.labels, ctx.protocol.sgdet_label_noise, prob.cols(), rng);
    }
  }
  out.triplets = rank_triplets(ri, ctx.protocol, ctx.space, ctx.freq);
  if (ctx.protocol.relational_nms) out.triplets = relational_nms(out.triplets, ctx.protocol.iou_threshold);
  return out;
}

struct EvalResult {
  std::vector<ImagePredictions> predictions;
  std::vector<ImageMatch> matches;
};

inline std::vector<ImageMatch> match_all(const std::vector<ImagePredictions>& preds, const Dataset& test,
                                         double iou_threshold) {
  std::map<std::uint64_t, const ImagePredictions*> by_id;
  for (const auto& p : preds) by_id[p.image_id] = &p;
  std::vector<ImageMatch> out;
  static const std::vector<TripletPrediction> none;
  for (const auto& g : test.graphs) {
    auto it = by_id.find(g.image_id);
    out.push_back(match(it == by_id.end() ? none : it->second->triplets, g, iou_threshold));
  }
  return out;
}

inline EvalResult evaluate_model(const Dataset& test, const FeatureStore& fs, const InferenceContext& ctx,
                                 std::size_t threads = 1) {
  validate_protocol(ctx.protocol);
  EvalResult r;
  r.predictions.resize(test.graphs.size());
  parallel_for(test.graphs.size(), threads,
               [&](std::size_t i) { r.predictions[i] = predict_image(test.graphs[i], fs, ctx); });
  r.matches = match_all(r.predictions, test, ctx.protocol.iou_threshold);
  return r;
}

}  // namespace sgz
