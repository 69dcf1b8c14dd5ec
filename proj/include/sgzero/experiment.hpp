#pragma once

// End-to-end synthetic pipeline: generate data, train the plausibility scorer,
// reduce the unseen space, train the network and evaluate it.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgzero/synthetic.hpp"
#include "sgzero/train.hpp"
#include "sgzero/usrl.hpp"

namespace sgz {

// The synthetic generator makes roughly a third to a half of all compositions
// plausible, far denser than a real-image vocabulary, so its class prior is higher.
inline PuConfig synthetic_pu_defaults() {
  PuConfig c;
  c.prior = 0.3;
  return c;
}

struct ExperimentConfig {
  GenConfig gen;
  CenConfig cen;
  TrainConfig train;
  PuConfig pu = synthetic_pu_defaults();
  ProtocolConfig protocol;
  double reduction_rate = 0.85;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, gen, cen, train, pu, protocol, reduction_rate)

namespace detail {
inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& ref, const std::string& path) {
  if (!user.is_object() || !ref.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!ref.contains(key)) throw std::invalid_argument("config: unknown key '" + here + "'");
    check_known_keys(value, ref.at(key), here);
  }
}

/// First path where `want` and `got` disagree, or "" when they match.
inline std::string first_difference(const nlohmann::json& want, const nlohmann::json& got, const std::string& path) {
  if (want.is_object() && got.is_object()) {
    for (const auto& [key, value] : want.items()) {
      if (!got.contains(key)) return path + key;
      const std::string d = first_difference(value, got.at(key), path + key + ".");
      if (!d.empty()) return d;
    }
    return "";
  }
  return want == got ? "" : (path.empty() ? "<root>" : path.substr(0, path.size() - 1));
}
}  // namespace detail

inline void validate_experiment(const ExperimentConfig& c) {
  validate_gen_config(c.gen);
  validate_train_config(c.train);
  validate_pu_config(c.pu);
  validate_protocol(c.protocol);
  if (!(c.reduction_rate >= 0.0 && c.reduction_rate <= 1.0))
    throw std::invalid_argument("config: reduction_rate must be in [0, 1]");
}

/// Overlays a partial JSON config on the defaults. Unknown keys and
/// mistyped values are rejected with the offending path.
inline ExperimentConfig experiment_from_json(const nlohmann::json& user) {
  if (!user.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  nlohmann::json merged = ExperimentConfig{};
  detail::check_known_keys(user, merged, "");
  merged.merge_patch(user);
  ExperimentConfig c;
  try {
    c = merged.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  // Values that do not survive a round trip (unknown enum names, fractional
  // or negative counts) would otherwise be silently coerced.
  const std::string bad = detail::first_difference(merged, nlohmann::json(c), "");
  if (!bad.empty()) throw std::invalid_argument("config: invalid value for '" + bad + "'");
  return c;
}

/// Class counts and feature width follow the generator.
inline CenConfig cen_for(const CenConfig& base, const Dataset& ds, std::size_t feature_dim) {
  CenConfig c = base;
  c.num_entity_classes = static_cast<std::uint32_t>(ds.num_entity_classes());
  c.num_predicates = static_cast<std::uint32_t>(ds.num_predicates());
  c.feature_dim = static_cast<std::uint32_t>(feature_dim);
  return c;
}

/// Data and label statistics shared by every variant trained on one seed.
struct Prepared {
  SyntheticData data;
  Dataset train;  // after the optional object-overlap filter
  TripletStats stats;
  AlphaTable alpha;
  TripletSet seen;
  TripletSet unseen;
  FrequencyBias freq;
  std::vector<ScoredTriplet> scores;  // plausibility over the composition space
};

inline std::vector<ScoredTriplet> score_space(const ParamStore& usrl, const Dataset& names,
                                              const EmbeddingTable& table) {
  const auto space = composition_space(names.num_entity_classes(), names.num_predicates());
  const auto s = score_triplets(usrl, space, names, table);
  std::vector<ScoredTriplet> out;
  for (std::size_t i = 0; i < space.size(); ++i) out.push_back({space[i], s[i]});
  return out;
}

/// Label statistics for already generated (or loaded) data. The scorer is
/// trained from `seed` unless parameters are supplied.
inline Prepared prepare_from(SyntheticData data, const ExperimentConfig& cfg, std::uint64_t seed,
                             const ParamStore* usrl = nullptr) {
  Prepared p;
  p.data = std::move(data);
  p.train = cfg.protocol.object_overlap_filter ? object_overlap_filter(p.data.train) : p.data.train;
  p.stats = compute_triplet_stats(p.train);
  p.alpha = compute_alpha(p.stats);
  p.seen = triplet_set(p.train);
  p.unseen = unseen_split(p.train, p.data.test);
  p.freq = FrequencyBias(p.train);
  if (usrl) {
    p.scores = score_space(*usrl, p.train, p.data.embeddings);
  } else {
    const auto space = composition_space(p.train.num_entity_classes(), p.train.num_predicates());
    const UsrlResult u = train_usrl(p.seen, space, p.train, p.data.embeddings, cfg.pu, seed);
    p.scores = score_space(u.params, p.train, p.data.embeddings);
  }
  return p;
}

inline Prepared prepare(const ExperimentConfig& cfg, std::uint64_t seed) {
  return prepare_from(generate_synthetic(cfg.gen, seed), cfg, seed);
}

/// AUC of plausible-but-unseen compositions against impossible ones.
inline double plausibility_auc(const std::vector<ScoredTriplet>& scores, const TripletSet& seen,
                               const TripletSet& plausible) {
  std::vector<double> pos, neg;
  for (const auto& st : scores) {
    if (seen.count(st.key)) continue;
    (plausible.count(st.key) ? pos : neg).push_back(st.score);
  }
  return auc_rank(pos, neg);
}

struct VariantResult {
  TrainState state;
  RunRecord record;
  KeepSet keep;
  EvalResult eval;
  std::vector<MetricRow> metrics;

  double metric(const std::string& name, std::size_t k) const {
    const MetricRow* r = find_metric(metrics, name, k);
    if (!r || !r->value) throw std::out_of_range("metric " + name + "@" + std::to_string(k) + " unavailable");
    return *r->value;
  }
};

inline CalibrationSpace make_space(const Prepared& p, const KeepSet& keep) {
  return CalibrationSpace(p.train.num_predicates(), p.seen, keep.kept, p.alpha);
}

inline VariantResult evaluate_variant(const Prepared& p, const CenConfig& cen,
                                      const ParamStore& params, const KeepSet& keep, const ProtocolConfig& protocol,
                                      std::uint64_t seed, std::size_t threads) {
  VariantResult r;
  r.keep = keep;
  const CalibrationSpace space = make_space(p, keep);
  InferenceContext ctx{cen, params, protocol, &space, &p.freq, seed};
  r.eval = evaluate_model(p.data.test, p.data.features, ctx, threads);
  r.metrics = compute_metrics(r.eval.matches, p.unseen, protocol);
  return r;
}

/// Trains one network on prepared data under `cfg` and evaluates it.
inline VariantResult run_variant(const Prepared& p, const ExperimentConfig& cfg, std::uint64_t seed,
                                 std::size_t threads = 1) {
  const KeepSet keep = reduce_space(p.scores, cfg.reduction_rate, p.seen);
  const CalibrationSpace space = make_space(p, keep);
  const CenConfig cen = cen_for(cfg.cen, p.train, p.data.features.dim());
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  RunRecord record;
  TrainState st = train(TrainData{p.train, p.data.features, space, cen}, tc, record);
  VariantResult r = evaluate_variant(p, cen, st.params, keep, cfg.protocol, seed, threads);
  r.state = std::move(st);
  r.record = std::move(record);
  return r;
}

/// The full method's defaults with every calibration component switched off.
inline ExperimentConfig ablation_of(ExperimentConfig cfg) {
  cfg.train.tcl.lambda = 0.0;
  cfg.train.tcl.alpha_in_ce = false;
  cfg.protocol.calibrate_inference = false;
  cfg.reduction_rate = 0.0;
  return cfg;
}

}  // namespace sgz
