#pragma once

// Triplet calibration: count-based margins for seen triplets, the unseen
// calibration loss, margin cross-entropy, their weighted sum, and calibrated
// inference.
//
// Label space per (subject class, object class) pair is background plus every
// predicate. Each predicate entry is exactly one of:
//   seen         - triplet annotated in train;     margin -alpha (dynamic) or -1 (fixed)
//   kept unseen  - unseen, retained by reduction;  margin +1
//   removed      - unseen, pruned by reduction;    margin -1
// Background always takes margin -1 in calibration and 0 in cross-entropy.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgzero/autograd.hpp"
#include "sgzero/sgdata.hpp"

namespace sgz {

struct AlphaTable {
  std::map<TripletKey, double> alpha;

  /// Margin for a seen triplet; 0 for keys outside the table.
  double at(const TripletKey& k) const {
    auto it = alpha.find(k);
    return it == alpha.end() ? 0.0 : it->second;
  }
};

/// alpha(s,c,o) = ln(n_max / n_sco) * sum_i n_i / sum_j n_j ln(n_max / n_j).
/// When every count is equal the normalizer is 0 and all margins are 0.
inline AlphaTable compute_alpha(const TripletStats& stats) {
  if (stats.counts.empty()) throw std::invalid_argument("compute_alpha: empty statistics");
  const double n_max = static_cast<double>(stats.n_max);
  double total = 0.0, weighted = 0.0;
  for (const auto& [_, n] : stats.counts) {
    total += static_cast<double>(n);
    weighted += static_cast<double>(n) * std::log(n_max / static_cast<double>(n));
  }
  AlphaTable t;
  for (const auto& [k, n] : stats.counts) {
    t.alpha[k] = weighted > 0.0 ? std::log(n_max / static_cast<double>(n)) * total / weighted : 0.0;
  }
  return t;
}

inline void write_alpha_csv(std::ostream& os, const AlphaTable& t, const TripletStats& stats,
                            const Dataset& names) {
  os << "s_class,predicate,o_class,count,alpha\n";
  char buf[64];
  for (const auto& [k, a] : t.alpha) {
    std::snprintf(buf, sizeof buf, "%.17g", a);
    os << names.entity_classes.at(k.s) << ',' << names.predicate_classes.at(k.p) << ','
       << names.entity_classes.at(k.o) << ',' << stats.counts.at(k) << ',' << buf << '\n';
  }
}

enum class MarginMode { fixed, dynamic };
enum class CalTarget { background, all };
enum class EntryKind { seen, kept_unseen, removed, background };

NLOHMANN_JSON_SERIALIZE_ENUM(MarginMode, {{MarginMode::fixed, "fixed"}, {MarginMode::dynamic, "dynamic"}})
NLOHMANN_JSON_SERIALIZE_ENUM(CalTarget, {{CalTarget::background, "background"}, {CalTarget::all, "all"}})

struct TclConfig {
  double lambda = 0.01;
  MarginMode margin_mode = MarginMode::dynamic;
  CalTarget cal_target = CalTarget::background;
  bool alpha_in_ce = true;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TclConfig, lambda, margin_mode, cal_target, alpha_in_ce)

struct MarginVector {
  std::vector<double> values;  // |C_p| + 1, index 0 = background
  std::vector<EntryKind> kinds;
  bool has_kept_unseen() const {
    for (auto k : kinds)
      if (k == EntryKind::kept_unseen) return true;
    return false;
  }
};

/// Margins over the background-augmented label space for one (s, o) pair.
inline MarginVector margin_vector(std::uint32_t s, std::uint32_t o, std::size_t num_predicates,
                                  const TripletSet& seen, const TripletSet& kept_unseen,
                                  const AlphaTable& alpha, MarginMode mode) {
  MarginVector m;
  m.values.assign(num_predicates + 1, -1.0);
  m.kinds.assign(num_predicates + 1, EntryKind::background);
  for (std::uint32_t p = 0; p < num_predicates; ++p) {
    const TripletKey k{s, p, o};
    const bool is_seen = seen.count(k) != 0;
    const bool is_kept = kept_unseen.count(k) != 0;
    if (is_seen && is_kept) {
      throw std::logic_error("margin_vector: triplet (" + std::to_string(s) + "," + std::to_string(p) +
                             "," + std::to_string(o) + ") is both seen and unseen");
    }
    const std::size_t c = logit_index(p);
    if (is_seen) {
      m.kinds[c] = EntryKind::seen;
      m.values[c] = mode == MarginMode::dynamic ? -alpha.at(k) : -1.0;
    } else if (is_kept) {
      m.kinds[c] = EntryKind::kept_unseen;
      m.values[c] = 1.0;
    } else {
      m.kinds[c] = EntryKind::removed;
    }
  }
  return m;
}

/// Everything the losses and calibrated inference need about the label space.
class CalibrationSpace {
 public:
  CalibrationSpace() = default;
  CalibrationSpace(std::size_t num_predicates, TripletSet seen, const TripletSet& keep, AlphaTable alpha)
      : num_predicates_(num_predicates), seen_(std::move(seen)), alpha_(std::move(alpha)) {
    for (const auto& k : keep)
      if (!seen_.count(k)) kept_unseen_.insert(k);
  }

  std::size_t width() const noexcept { return num_predicates_ + 1; }
  const TripletSet& seen() const noexcept { return seen_; }
  const TripletSet& kept_unseen() const noexcept { return kept_unseen_; }
  const AlphaTable& alpha() const noexcept { return alpha_; }

  MarginVector margins(std::uint32_t s, std::uint32_t o, MarginMode mode) const {
    return margin_vector(s, o, num_predicates_, seen_, kept_unseen_, alpha_, mode);
  }

  /// Margin added inside the cross-entropy: alpha on seen entries, 0 elsewhere.
  std::vector<double> ce_alpha(std::uint32_t s, std::uint32_t o) const {
    std::vector<double> a(width(), 0.0);
    for (std::uint32_t p = 0; p < num_predicates_; ++p) {
      const TripletKey k{s, p, o};
      if (seen_.count(k)) a[logit_index(p)] = alpha_.at(k);
    }
    return a;
  }

  /// Inference margins: +1 for kept unseen triplets, -1 for everything else.
  std::vector<double> inference_margins(std::uint32_t s, std::uint32_t o) const {
    std::vector<double> m(width(), -1.0);
    for (std::uint32_t p = 0; p < num_predicates_; ++p)
      if (kept_unseen_.count({s, p, o})) m[logit_index(p)] = 1.0;
    return m;
  }

 private:
  std::size_t num_predicates_ = 0;
  TripletSet seen_;
  TripletSet kept_unseen_;
  AlphaTable alpha_;
};

// ---------------------------------------------------------------------------
// Losses. Row-wise over an m x C logit matrix; each returns an m x 1 column.

/// -ln sum_{c in unseen} softmax(r)_c per row. Every row's mask needs an entry.
inline Var loss_cal(Var logits, const Tensor& unseen_mask) {
  return sub(log_sum_exp(logits), masked_log_sum_exp(logits, unseen_mask));
}

/// loss_cal evaluated at r + margins.
inline Var loss_cal_margined(Var logits, const Tensor& margins, const Tensor& unseen_mask) {
  return loss_cal(add(logits, logits.graph->constant(margins)), unseen_mask);
}

/// -ln softmax(r - alpha)_gt per row.
inline Var loss_ce_margined(Var logits, const std::vector<std::size_t>& gt, const Tensor& alpha) {
  for (auto c : gt)
    if (c >= logits.cols()) throw std::out_of_range("loss_ce_margined: class out of range");
  Var shifted = sub(logits, logits.graph->constant(alpha));
  return scale(select_per_row(log_softmax(shifted), gt), -1.0);
}

/// One candidate pair inside a logit matrix.
struct PairSample {
  std::size_t row = 0;     // row of the predicate logit matrix
  std::size_t target = 0;  // logit index of the annotation (kBackground if none)
  std::uint32_t s = 0;     // subject class
  std::uint32_t o = 0;     // object class
};

struct TotalLoss {
  Var total;
  Var ce;
  std::optional<Var> cal;
  std::size_t ce_pairs = 0;
  std::size_t cal_pairs = 0;
};

/// mean CE over all sampled pairs + lambda * mean L_cal over eligible pairs.
/// Pairs whose (s, o) has no kept unseen predicate are skipped in the cal term.
inline TotalLoss total_loss(Var logits, const std::vector<PairSample>& batch,
                            const CalibrationSpace& space, const TclConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("total_loss: no eligible pair for cross-entropy");
  if (cfg.lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  const std::size_t C = space.width();
  if (logits.cols() != C) throw ShapeError("total_loss: logit width does not match label space");

  TotalLoss out;
  std::vector<std::size_t> rows, targets;
  Tensor alpha({batch.size(), C}, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    rows.push_back(batch[i].row);
    targets.push_back(batch[i].target);
    if (cfg.alpha_in_ce) {
      const auto a = space.ce_alpha(batch[i].s, batch[i].o);
      for (std::size_t c = 0; c < C; ++c) alpha(i, c) = a[c];
    }
  }
  out.ce = mean(loss_ce_margined(gather_rows(logits, rows), targets, alpha));
  out.ce_pairs = batch.size();
  out.total = out.ce;

  std::vector<std::size_t> cal_rows;
  std::vector<MarginVector> cal_margins;
  for (const auto& b : batch) {
    if (cfg.cal_target == CalTarget::background && b.target != kBackground) continue;
    auto m = space.margins(b.s, b.o, cfg.margin_mode);
    if (!m.has_kept_unseen()) continue;
    cal_rows.push_back(b.row);
    cal_margins.push_back(std::move(m));
  }
  if (!cal_rows.empty()) {
    Tensor margins({cal_rows.size(), C}, 0.0), mask({cal_rows.size(), C}, 0.0);
    for (std::size_t i = 0; i < cal_rows.size(); ++i) {
      for (std::size_t c = 0; c < C; ++c) {
        margins(i, c) = cal_margins[i].values[c];
        mask(i, c) = cal_margins[i].kinds[c] == EntryKind::kept_unseen ? 1.0 : 0.0;
      }
    }
    out.cal = mean(loss_cal_margined(gather_rows(logits, cal_rows), margins, mask));
    out.cal_pairs = cal_rows.size();
    if (cfg.lambda != 0.0) out.total = add(out.ce, scale(*out.cal, cfg.lambda));
  }
  return out;
}

/// argmax_c (r_c + m_c); ties go to the lowest index.
inline std::size_t calibrated_argmax(std::span<const double> logits, std::span<const double> margins) {
  if (logits.size() != margins.size() || logits.empty()) {
    throw std::invalid_argument("calibrated_argmax: size mismatch");
  }
  std::size_t best = 0;
  double best_v = logits[0] + margins[0];
  for (std::size_t c = 1; c < logits.size(); ++c) {
    const double v = logits[c] + margins[c];
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

}  // namespace sgz
