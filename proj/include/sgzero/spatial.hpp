#pragma once

// Relative spatial encoding of a subject/object box pair: normalized union-box
// location (8), log size ratios (4) and partner-normalized corner offsets (8).

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "sgzero/bbox.hpp"

namespace sgz {

inline constexpr std::size_t kSpatialDim = 20;

struct SpatialFeature {
  std::array<double, 8> union_location{};
  std::array<double, 4> size_ratio{};
  std::array<double, 8> relative_location{};

  std::array<double, kSpatialDim> concatenated() const {
    std::array<double, kSpatialDim> out{};
    std::copy(union_location.begin(), union_location.end(), out.begin());
    std::copy(size_ratio.begin(), size_ratio.end(), out.begin() + 8);
    std::copy(relative_location.begin(), relative_location.end(), out.begin() + 12);
    return out;
  }
};

/// The printed corner-offset formula uses x_o2 in the fourth component; the
/// corrected form uses y_o2, matching the other seven components.
enum class OffsetFormula { corrected, literal };

inline BBox union_box(const BBox& s, const BBox& o) {
  return {std::min(s.x1, o.x1), std::min(s.y1, o.y1), std::max(s.x2, o.x2), std::max(s.y2, o.y2)};
}

inline std::array<double, 8> union_location(const BBox& u, double w, double h) {
  if (!(w > 0) || !(h > 0)) throw std::invalid_argument("union_location: zero image dimension");
  return {u.x1 / w,
          u.y1 / h,
          u.x2 / w,
          u.y2 / h,
          (u.x1 + u.x2) / (2 * w),
          (u.y1 + u.y2) / (2 * h),
          u.width() / w,
          u.height() / h};
}

namespace detail {
inline void require_positive(const BBox& b, const char* op) {
  if (!(b.width() > 0) || !(b.height() > 0)) {
    throw std::invalid_argument(std::string(op) + ": non-positive box dimension");
  }
}
}  // namespace detail

inline std::array<double, 4> size_ratio(const BBox& s, const BBox& o) {
  detail::require_positive(s, "size_ratio");
  detail::require_positive(o, "size_ratio");
  const double lw = std::log(s.width() / o.width());
  const double lh = std::log(s.height() / o.height());
  return {lw, lh, -lw, -lh};
}

inline std::array<double, 8> relative_location(const BBox& s, const BBox& o,
                                               OffsetFormula formula = OffsetFormula::corrected) {
  detail::require_positive(s, "relative_location");
  detail::require_positive(o, "relative_location");
  const double ws = s.width(), hs = s.height();
  const double wo = o.width(), ho = o.height();
  const double fourth = formula == OffsetFormula::corrected ? (s.y2 - o.y2) / ho : (s.y2 - o.x2) / ho;
  return {(s.x1 - o.x1) / wo, (s.y1 - o.y1) / ho, (s.x2 - o.x2) / wo, fourth,
          (o.x1 - s.x1) / ws, (o.y1 - s.y1) / hs, (o.x2 - s.x2) / ws, (o.y2 - s.y2) / hs};
}

inline SpatialFeature relative_spatial(const BBox& s, const BBox& o, double w, double h,
                                       OffsetFormula formula = OffsetFormula::corrected) {
  SpatialFeature f;
  f.union_location = union_location(union_box(s, o), w, h);
  f.size_ratio = size_ratio(s, o);
  f.relative_location = relative_location(s, o, formula);
  return f;
}

}  // namespace sgz
