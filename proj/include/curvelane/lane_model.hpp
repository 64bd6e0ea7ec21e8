#pragma once

// Lane representations: cubic (order-R) polynomial lanes, fixed-y anchor point
// sets with a normalized (start, end) range, ground-truth polylines, and the
// fitting / resampling utilities built on them.

#include "curvelane/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace curvelane {

class LaneModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double span() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  double clamp(double v) const { return std::clamp(v, lo, hi); }
  bool operator==(const Interval&) const = default;
};

/// The 3D region lanes are modeled in.
struct WorldBox {
  Interval x{-30.0, 30.0};
  Interval y{3.0, 103.0};
  Interval z{-10.0, 10.0};

  bool contains(const Vec3& p) const { return x.contains(p.x()) && y.contains(p.y()) && z.contains(p.z()); }
  Vec3 clamp(const Vec3& p) const { return {x.clamp(p.x()), y.clamp(p.y()), z.clamp(p.z())}; }
  bool operator==(const WorldBox&) const = default;
};

/// `count` positions uniformly spaced over `span`, both ends included.
inline std::vector<double> uniform_y_positions(int count, Interval span = WorldBox{}.y) {
  if (count < 2) throw LaneModelError("uniform_y_positions: need at least 2 positions");
  std::vector<double> ys(count);
  for (int i = 0; i < count; ++i) ys[i] = span.lo + span.span() * static_cast<double>(i) / (count - 1);
  return ys;
}

/// Lane as x(y) and z(y) polynomials over [y_start, y_end]. Coefficients are
/// ordered by ascending power of y (meters).
struct PolyLane {
  double confidence = 1.0;
  double y_start = 0.0;
  double y_end = 0.0;
  std::vector<double> coeffs_x;
  std::vector<double> coeffs_z;

  int order() const { return static_cast<int>(coeffs_x.size()) - 1; }

  void validate(const Interval& y_range) const {
    if (coeffs_x.empty() || coeffs_x.size() != coeffs_z.size()) {
      throw LaneModelError("PolyLane: coefficient vectors must both have R+1 entries");
    }
    if (!(y_start < y_end)) throw LaneModelError("PolyLane: y_start must be < y_end");
    if (!y_range.contains(y_start) || !y_range.contains(y_end)) {
      throw LaneModelError("PolyLane: boundary outside the configured y range");
    }
    if (!(confidence >= 0.0 && confidence <= 1.0)) throw LaneModelError("PolyLane: confidence outside [0,1]");
  }
};

inline double horner(std::span<const double> coeffs, double y) {
  double acc = 0.0;
  for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * y + *it;
  return acc;
}

inline std::vector<Vec3> sample_lane_points(const PolyLane& lane, std::span<const double> y_positions) {
  std::vector<Vec3> out;
  out.reserve(y_positions.size());
  for (double y : y_positions) out.emplace_back(horner(lane.coeffs_x, y), y, horner(lane.coeffs_z, y));
  return out;
}

/// Normalized (start, end) fractions of the y span.
struct AnchorRange {
  double start = 0.0;
  double end = 1.0;
  bool operator==(const AnchorRange&) const = default;
};

struct AnchorPointSet {
  std::vector<Vec3> points;
  AnchorRange range;

  void validate(std::size_t expected_count) const {
    if (points.size() != expected_count) throw LaneModelError("AnchorPointSet: wrong point count");
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (!(points[i].y() > points[i - 1].y())) throw LaneModelError("AnchorPointSet: y must increase strictly");
    }
    if (!(range.start >= 0.0 && range.start < range.end && range.end <= 1.0)) {
      throw LaneModelError("AnchorPointSet: range must satisfy 0 <= s < e <= 1");
    }
  }
};

struct GroundTruthLane {
  std::vector<Vec3> points;  // sorted by y
  bool is_lane = true;
  int category = 0;
  std::optional<int> track_id;

  double y_start() const { return points.empty() ? 0.0 : points.front().y(); }
  double y_end() const { return points.empty() ? 0.0 : points.back().y(); }

  void validate() const {
    if (is_lane && points.size() < 2) throw LaneModelError("GroundTruthLane: need at least 2 points");
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (points[i].y() < points[i - 1].y()) throw LaneModelError("GroundTruthLane: points not sorted by y");
    }
  }

  bool operator==(const GroundTruthLane& o) const {
    return points == o.points && is_lane == o.is_lane && category == o.category && track_id == o.track_id;
  }
};

// ---------------------------------------------------------------------------

struct PolyFit {
  std::vector<double> coeffs_x;
  std::vector<double> coeffs_z;
};

namespace detail {

/// Converts coefficients of p(t), t = (y - center) / scale, into coefficients
/// of the same polynomial in y.
inline std::vector<double> unscale_poly(const Eigen::VectorXd& c, double center, double scale) {
  const int n = static_cast<int>(c.size());
  std::vector<double> out(n, 0.0);
  for (int r = 0; r < n; ++r) {
    // c_r * scale^-r * (y - center)^r
    const double lead = c[r] / std::pow(scale, r);
    double binom = 1.0;
    for (int k = 0; k <= r; ++k) {
      if (k > 0) binom = binom * (r - k + 1) / k;
      out[k] += lead * binom * std::pow(-center, r - k);
    }
  }
  return out;
}

}  // namespace detail

/// Least-squares x(y), z(y) fit of the given order.
inline PolyFit fit_polynomials(std::span<const Vec3> points, int order) {
  if (order < 0) throw LaneModelError("fit_polynomials: negative order");
  const int n = static_cast<int>(points.size());
  if (n < order + 1) throw LaneModelError("fit_polynomials: need at least R+1 points");
  std::vector<double> ys;
  ys.reserve(n);
  for (const auto& p : points) ys.push_back(p.y());
  std::vector<double> sorted = ys;
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
  if (distinct < order + 1) throw LaneModelError("fit_polynomials: rank deficient (too few distinct y values)");

  double center = 0.0;
  for (double y : ys) center += y;
  center /= n;
  double scale = 0.0;
  for (double y : ys) scale = std::max(scale, std::abs(y - center));
  if (scale == 0.0) scale = 1.0;

  Eigen::MatrixXd a(n, order + 1);
  Eigen::MatrixXd b(n, 2);
  for (int i = 0; i < n; ++i) {
    const double t = (ys[i] - center) / scale;
    double pw = 1.0;
    for (int r = 0; r <= order; ++r, pw *= t) a(i, r) = pw;
    b(i, 0) = points[i].x();
    b(i, 1) = points[i].z();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < order + 1) throw LaneModelError("fit_polynomials: rank deficient design matrix");
  const Eigen::MatrixXd sol = qr.solve(b);
  return {detail::unscale_poly(sol.col(0), center, scale), detail::unscale_poly(sol.col(1), center, scale)};
}

struct ClippedPoints {
  std::vector<Vec3> points;
  std::vector<std::uint8_t> active;

  int active_count() const { return static_cast<int>(std::count(active.begin(), active.end(), 1)); }
};

/// Whether y lies in the active window [lo + s*span, lo + e*span). The window
/// closes on the right only when it reaches the end of the span, so (0, 1)
/// keeps every position.
inline bool in_range_window(double y, const AnchorRange& range, const Interval& y_span) {
  const double lo = y_span.lo + range.start * y_span.span();
  const double hi = y_span.lo + range.end * y_span.span();
  return y >= lo && (y < hi || (range.end >= 1.0 && y <= y_span.hi));
}

inline ClippedPoints clip_points_to_range(std::span<const Vec3> points, const AnchorRange& range,
                                          const Interval& y_span) {
  ClippedPoints out;
  out.points.assign(points.begin(), points.end());
  out.active.reserve(points.size());
  for (const auto& p : points) out.active.push_back(in_range_window(p.y(), range, y_span) ? 1 : 0);
  return out;
}

// ---------------------------------------------------------------------------
// Polyline resampling onto a fixed y grid.

struct ResampledLane {
  std::vector<double> x;
  std::vector<double> z;
  std::vector<std::uint8_t> visible;  // y inside the polyline's own [y_first, y_last]

  int visible_count() const { return static_cast<int>(std::count(visible.begin(), visible.end(), 1)); }
};

/// Piecewise-linear interpolation of a y-sorted polyline at `y_positions`.
/// Outside the polyline's y extent the value is clamped to the nearest end
/// point (or linearly extrapolated when `extrapolate`), and marked invisible.
inline ResampledLane resample_polyline(std::span<const Vec3> points, std::span<const double> y_positions,
                                       bool extrapolate = false) {
  ResampledLane out;
  out.x.resize(y_positions.size(), 0.0);
  out.z.resize(y_positions.size(), 0.0);
  out.visible.resize(y_positions.size(), 0);
  if (points.empty()) return out;
  if (points.size() == 1) {
    for (std::size_t i = 0; i < y_positions.size(); ++i) {
      out.x[i] = points[0].x();
      out.z[i] = points[0].z();
      out.visible[i] = y_positions[i] == points[0].y();
    }
    return out;
  }
  const double y_first = points.front().y();
  const double y_last = points.back().y();
  std::size_t seg = 0;
  for (std::size_t i = 0; i < y_positions.size(); ++i) {
    const double y = y_positions[i];
    out.visible[i] = (y >= y_first && y <= y_last) ? 1 : 0;
    const Vec3* a;
    const Vec3* b;
    if (y <= y_first) {
      a = &points[0];
      b = &points[1];
    } else if (y >= y_last) {
      a = &points[points.size() - 2];
      b = &points[points.size() - 1];
    } else {
      // y_positions is usually sorted; restart the scan when it is not.
      if (seg >= points.size() - 1 || points[seg].y() > y) seg = 0;
      while (seg + 2 < points.size() && points[seg + 1].y() < y) ++seg;
      a = &points[seg];
      b = &points[seg + 1];
    }
    const double dy = b->y() - a->y();
    double t = dy > 0.0 ? (y - a->y()) / dy : 0.0;
    if (!extrapolate) t = std::clamp(t, 0.0, 1.0);
    out.x[i] = a->x() + t * (b->x() - a->x());
    out.z[i] = a->z() + t * (b->z() - a->z());
  }
  return out;
}

}  // namespace curvelane
