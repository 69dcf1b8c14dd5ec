#pragma once

// Unseen space reduction: an interchangeability scorer over (subject,
// predicate, object) embeddings trained with the non-negative PU risk, then a
// quantile cut over the unseen part of the composition space.
//
//   d_s = sigmoid(t_p * t_o) o sigmoid(W_s t_s)     (and cyclically for d_p, d_o)
//   d   = w_usrl [d_s, d_p, d_o]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgzero/features.hpp"
#include "sgzero/nn.hpp"
#include "sgzero/sgdata.hpp"

namespace sgz {

struct PuConfig {
  double prior = 0.03;
  std::uint32_t unlabeled_per_step = 256;
  double lr = 1.0;
  std::uint32_t epochs = 1000;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PuConfig, prior, unlabeled_per_step, lr, epochs)

inline void validate_pu_config(const PuConfig& c) {
  if (!(c.prior > 0.0 && c.prior < 1.0)) throw std::invalid_argument("PuConfig: prior must be in (0, 1)");
  if (c.unlabeled_per_step == 0) throw std::invalid_argument("PuConfig: unlabeled_per_step must be >= 1");
  if (!(c.lr > 0.0)) throw std::invalid_argument("PuConfig: lr must be > 0");
}

template <class Rng>
ParamStore init_usrl_params(std::size_t dim, Rng& rng) {
  ParamStore ps;
  ps.add("usrl.w_s", init_uniform(dim, dim, dim, rng));
  ps.add("usrl.w_p", init_uniform(dim, dim, dim, rng));
  ps.add("usrl.w_o", init_uniform(dim, dim, dim, rng));
  nn::add_star(ps, "usrl.star_s", dim, dim, dim, rng);
  nn::add_star(ps, "usrl.star_p", dim, dim, dim, rng);
  nn::add_star(ps, "usrl.star_o", dim, dim, dim, rng);
  nn::add_linear(ps, "usrl.out", 3 * dim, 1, rng);
  return ps;
}

inline ParamStore zero_usrl_params(std::size_t dim) {
  std::mt19937_64 rng(0);
  ParamStore ps = init_usrl_params(dim, rng);
  for (auto& [_, t] : ps)
    for (auto& v : t.values()) v = 0.0;
  return ps;
}

/// Plausibility logits for a batch of triplets; each input is B x dim.
inline Var triplet_score(const BoundParams& p, Var ts, Var tp, Var to) {
  if (ts.cols() != tp.cols() || tp.cols() != to.cols()) {
    throw ShapeError("triplet_score: embedding dimensions differ");
  }
  Var ds = hadamard(sigmoid(nn::star(p, "usrl.star_s", tp, to)), sigmoid(matmul(ts, p["usrl.w_s"])));
  Var dp = hadamard(sigmoid(nn::star(p, "usrl.star_p", ts, to)), sigmoid(matmul(tp, p["usrl.w_p"])));
  Var dd = hadamard(sigmoid(nn::star(p, "usrl.star_o", ts, tp)), sigmoid(matmul(to, p["usrl.w_o"])));
  return nn::linear(p, "usrl.out", concat_cols({ds, dp, dd}));
}

struct NnpuLoss {
  Var loss;
  double positive_risk = 0.0;     // pi/n_pos sum L+(h_i)
  double negative_estimate = 0.0;  // 1/n_u sum L-(h_j) - pi/n_pos sum L-(h_i)
  bool clamp_active = false;       // negative_estimate < 0
};

/// Non-negative PU risk with L+(d) = -ln sigmoid(d), L-(d) = -ln(1 - sigmoid(d)).
inline NnpuLoss nnpu_loss(Var positive, Var unlabeled, double prior) {
  if (positive.value().size() == 0 || unlabeled.value().size() == 0) {
    throw std::invalid_argument("nnpu_loss: empty sample set");
  }
  if (!(prior > 0.0 && prior < 1.0)) throw std::invalid_argument("nnpu_loss: prior must be in (0, 1)");
  Var pos_risk = scale(mean(softplus(scale(positive, -1.0))), prior);
  Var neg = sub(mean(softplus(unlabeled)), scale(mean(softplus(positive)), prior));
  NnpuLoss out;
  out.positive_risk = pos_risk.value().item();
  out.negative_estimate = neg.value().item();
  out.clamp_active = out.negative_estimate < 0.0;
  out.loss = add(pos_risk, relu(neg));
  return out;
}

/// Embedding rows for a list of triplets.
struct TripletEmbeddings {
  Tensor s, p, o;
};

inline TripletEmbeddings embed_triplets(const std::vector<TripletKey>& keys, const Dataset& names,
                                        const EmbeddingTable& table) {
  const std::size_t d = table.dim();
  TripletEmbeddings e{Tensor({keys.size(), d}, 0.0), Tensor({keys.size(), d}, 0.0),
                      Tensor({keys.size(), d}, 0.0)};
  std::map<std::string, std::vector<double>> cache;
  auto vec = [&](const std::string& name) -> const std::vector<double>& {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    if (!table.resolvable(name)) throw std::out_of_range("usrl: no embedding for class '" + name + "'");
    return cache.emplace(name, table.lookup(name)).first->second;
  };
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto& vs = vec(names.entity_classes.at(keys[i].s));
    const auto& vp = vec(names.predicate_classes.at(keys[i].p));
    const auto& vo = vec(names.entity_classes.at(keys[i].o));
    for (std::size_t j = 0; j < d; ++j) {
      e.s(i, j) = vs[j];
      e.p(i, j) = vp[j];
      e.o(i, j) = vo[j];
    }
  }
  return e;
}

inline std::vector<double> score_triplets(const ParamStore& params, const std::vector<TripletKey>& keys,
                                          const Dataset& names, const EmbeddingTable& table) {
  if (keys.empty()) return {};
  const auto e = embed_triplets(keys, names, table);
  Graph g;
  BoundParams p(g, params);
  Var s = triplet_score(p, g.constant(e.s), g.constant(e.p), g.constant(e.o));
  return {s.value().values().begin(), s.value().values().end()};
}

struct UsrlEpoch {
  std::uint32_t epoch = 0;
  double loss = 0.0;
  bool clamp_active = false;
};

struct UsrlResult {
  ParamStore params;
  std::vector<UsrlEpoch> history;
};

/// Gradient descent on the nnPU risk. Positives are the seen triplets;
/// unlabeled samples are drawn uniformly from the whole composition space.
inline UsrlResult train_usrl(const TripletSet& seen, const std::vector<TripletKey>& space,
                             const Dataset& names, const EmbeddingTable& table, const PuConfig& cfg,
                             std::uint64_t seed) {
  validate_pu_config(cfg);
  if (seen.empty()) throw std::invalid_argument("train_usrl: no seen triplets");
  if (space.empty()) throw std::invalid_argument("train_usrl: empty composition space");
  std::mt19937_64 rng(seed);
  UsrlResult out;
  out.params = init_usrl_params(table.dim(), rng);
  const std::vector<TripletKey> positives(seen.begin(), seen.end());
  const auto pos_emb = embed_triplets(positives, names, table);
  const auto space_emb = embed_triplets(space, names, table);
  std::uniform_int_distribution<std::size_t> pick(0, space.size() - 1);

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> idx(cfg.unlabeled_per_step);
    for (auto& i : idx) i = pick(rng);
    Graph g;
    BoundParams p(g, out.params);
    Var pos = triplet_score(p, g.constant(pos_emb.s), g.constant(pos_emb.p), g.constant(pos_emb.o));
    Var us = gather_rows(g.constant(space_emb.s), idx);
    Var up = gather_rows(g.constant(space_emb.p), idx);
    Var uo = gather_rows(g.constant(space_emb.o), idx);
    Var unl = triplet_score(p, us, up, uo);
    const NnpuLoss l = nnpu_loss(pos, unl, cfg.prior);
    g.backward(l.loss);
    for (auto& [name, t] : out.params) {
      const Tensor& gr = p[name].grad();
      for (std::size_t i = 0; i < t.size(); ++i) t[i] -= cfg.lr * gr[i];
    }
    out.history.push_back({epoch, l.loss.value().item(), l.clamp_active});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Space reduction

struct KeepSet {
  TripletSet kept;  // seen triplets plus retained unseen candidates
  double rate = 0.0;
  double threshold = 0.0;  // lowest retained unseen score (+inf when none retained)
  std::size_t unseen_candidates = 0;
};

struct ScoredTriplet {
  TripletKey key;
  double score = 0.0;
};

/// Keeps the llround((1 - rate) * |unseen|) highest-scoring unseen candidates.
/// Seen triplets are always kept. Ties rank by lexicographic key order.
inline KeepSet reduce_space(const std::vector<ScoredTriplet>& scores, double rate, const TripletSet& seen) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("reduce_space: rate must be in [0, 1]");
  std::vector<ScoredTriplet> unseen;
  KeepSet ks;
  ks.rate = rate;
  for (const auto& st : scores) {
    if (seen.count(st.key)) {
      ks.kept.insert(st.key);
    } else {
      unseen.push_back(st);
    }
  }
  for (const auto& k : seen) ks.kept.insert(k);
  std::sort(unseen.begin(), unseen.end(), [](const ScoredTriplet& a, const ScoredTriplet& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.key < b.key;
  });
  ks.unseen_candidates = unseen.size();
  const auto keep_n = static_cast<std::size_t>(std::llround((1.0 - rate) * static_cast<double>(unseen.size())));
  ks.threshold = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < keep_n; ++i) {
    ks.kept.insert(unseen[i].key);
    ks.threshold = unseen[i].score;
  }
  return ks;
}

inline void write_keepset_csv(std::ostream& os, const std::vector<ScoredTriplet>& scores, const KeepSet& ks,
                              const Dataset& names) {
  os << "s_class,predicate,o_class,score,kept\n";
  char buf[64];
  for (const auto& st : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", st.score);
    os << names.entity_classes.at(st.key.s) << ',' << names.predicate_classes.at(st.key.p) << ','
       << names.entity_classes.at(st.key.o) << ',' << buf << ',' << (ks.kept.count(st.key) ? 1 : 0) << '\n';
  }
}

struct KeepSetFile {
  std::vector<ScoredTriplet> scores;
  TripletSet kept;
};

inline KeepSetFile read_keepset_csv(std::istream& is, const Dataset& names) {
  std::map<std::string, std::uint32_t> ent, pred;
  for (std::uint32_t i = 0; i < names.entity_classes.size(); ++i) ent[names.entity_classes[i]] = i;
  for (std::uint32_t i = 0; i < names.predicate_classes.size(); ++i) pred[names.predicate_classes[i]] = i;
  KeepSetFile out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    auto bad = [&](const std::string& why) {
      return DataError("keep set line " + std::to_string(line_no) + ": " + why);
    };
    if (f.size() != 5) throw bad("expected 5 columns");
    if (!ent.count(f[0]) || !pred.count(f[1]) || !ent.count(f[2])) throw bad("unknown class name");
    const TripletKey k{ent[f[0]], pred[f[1]], ent[f[2]]};
    double score = 0.0;
    try {
      score = std::stod(f[3]);
    } catch (const std::exception&) {
      throw bad("bad score");
    }
    out.scores.push_back({k, score});
    if (f[4] == "1") {
      out.kept.insert(k);
    } else if (f[4] != "0") {
      throw bad("kept must be 0 or 1");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reduction quality

struct ReductionMetrics {
  double auc = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

/// Mann-Whitney AUC via mid-ranks: P(score_pos > score_neg) + 0.5 P(tie).
inline double auc_rank(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw std::invalid_argument("auc: empty positive or negative set");
  std::vector<std::pair<double, bool>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, true);
  for (double s : neg) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

/// AUC over `positives` vs `negatives`; recall/precision/F1 of the retained
/// unseen set with respect to `positives`.
inline ReductionMetrics eval_reduction(const std::map<TripletKey, double>& scores, const KeepSet& ks,
                                       const TripletSet& seen, const TripletSet& positives,
                                       const TripletSet& negatives) {
  if (positives.empty()) throw std::invalid_argument("eval_reduction: empty positive set");
  for (const auto& k : positives)
    if (negatives.count(k)) throw std::invalid_argument("eval_reduction: positive and negative sets overlap");
  std::vector<double> ps, ns;
  for (const auto& k : positives) ps.push_back(scores.at(k));
  for (const auto& k : negatives) ns.push_back(scores.at(k));
  ReductionMetrics m;
  m.auc = auc_rank(ps, ns);
  std::size_t hit = 0, kept_unseen = 0;
  for (const auto& k : ks.kept) {
    if (seen.count(k)) continue;
    ++kept_unseen;
    if (positives.count(k)) ++hit;
  }
  m.recall = static_cast<double>(hit) / static_cast<double>(positives.size());
  m.precision = kept_unseen ? static_cast<double>(hit) / static_cast<double>(kept_unseen) : 0.0;
  m.f1 = (m.recall + m.precision) > 0 ? 2 * m.recall * m.precision / (m.recall + m.precision) : 0.0;
  return m;
}

}  // namespace sgz
