#pragma once

// Bipartite assignment of ground-truth lanes to curve queries.

#include "curvelane/lane_model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

class MatchingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Minimum-cost assignment of every row to a distinct column (rows <= cols)
/// using the shortest augmenting path method with potentials. `cost` is
/// row-major rows x cols. Returns the column of each row.
inline std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols, double* total = nullptr) {
  if (rows > cols) throw MatchingError("hungarian: more rows than columns");
  if (static_cast<int>(cost.size()) != rows * cols) throw MatchingError("hungarian: cost size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw MatchingError("hungarian: non-finite cost");
  if (total) *total = 0.0;
  if (rows == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; p[j] is the row matched to column j
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assign(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (p[j]) assign[p[j] - 1] = j - 1;
  if (total) {
    for (int i = 0; i < rows; ++i) *total += cost[static_cast<std::size_t>(i) * cols + assign[i]];
  }
  return assign;
}

// ---------------------------------------------------------------------------

/// Ground-truth lane resampled on the model's y positions.
struct LaneTarget {
  std::vector<double> x, z;
  std::vector<std::uint8_t> visible;
  double y_start = 0.0, y_end = 0.0;

  int visible_count() const {
    int n = 0;
    for (auto v : visible) n += v;
    return n;
  }
};

/// Lane targets for one frame. Non-lane entries and lanes with no point on
/// the y grid are dropped.
inline std::vector<LaneTarget> make_targets(const std::vector<GroundTruthLane>& lanes, const std::vector<double>& ys,
                                            const Interval& y_span) {
  std::vector<LaneTarget> out;
  for (const auto& lane : lanes) {
    if (!lane.is_lane || lane.points.size() < 2) continue;
    const auto r = resample_polyline(lane.points, ys);
    LaneTarget t{r.x, r.z, r.visible, y_span.clamp(lane.y_start()), y_span.clamp(lane.y_end())};
    if (t.visible_count() == 0) continue;
    out.push_back(std::move(t));
  }
  return out;
}

enum class PointNormalization { mean, sum };

struct LossConfig {
  double cls = 2.0;             // classification
  double point = 5.0;           // curve points
  double boundary = 2.0;        // curve boundary
  double query_point = 2.0;     // refined anchors, every layer
  double query_boundary = 2.0;  // refined range, every layer
  double seg_weight = 1.0;
  double seg_pos_weight = 5.0;
  PointNormalization point_normalization = PointNormalization::mean;
  double log_eps = 1e-12;

  void validate() const {
    for (double w : {cls, point, boundary, query_point, query_boundary, seg_weight, seg_pos_weight}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw MatchingError("loss weights must be finite and >= 0");
    }
    if (!(log_eps > 0.0)) throw MatchingError("loss.log_eps must be > 0");
  }
};

/// Detached per-query predictions used for matching: probabilities {Q},
/// sampled points {Q, N} and metric boundaries {Q}.
struct PredictionSet {
  std::vector<double> prob;
  std::vector<double> x, z;
  std::vector<double> y_start, y_end;
  int points = 0;

  int count() const { return static_cast<int>(prob.size()); }
};

struct CostTerms {
  double cls = 0.0, point = 0.0, boundary = 0.0;
  double total() const { return cls + point + boundary; }
};

/// Point L1 over the visible positions (|dx| + |dz| per point), averaged or
/// summed according to `norm`.
inline double point_l1(const double* px, const double* pz, const LaneTarget& t, PointNormalization norm) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < t.visible.size(); ++i) {
    if (!t.visible[i]) continue;
    s += std::abs(px[i] - t.x[i]) + std::abs(pz[i] - t.z[i]);
    ++n;
  }
  if (norm == PointNormalization::mean && n > 0) s /= n;
  return s;
}

/// Boundary L1 in units of the y span.
inline double boundary_l1(double ys, double ye, const LaneTarget& t, const Interval& span) {
  return (std::abs(ys - t.y_start) + std::abs(ye - t.y_end)) / span.span();
}

/// Matching cost of query q against a lane (target) or against padding.
inline CostTerms pairwise_cost(const PredictionSet& p, int q, const LaneTarget* target, const LossConfig& cfg,
                               const Interval& span) {
  CostTerms c;
  if (!target) {
    c.cls = -cfg.cls * (1.0 - p.prob[q]);
    return c;
  }
  c.cls = -cfg.cls * p.prob[q];
  const std::size_t off = static_cast<std::size_t>(q) * p.points;
  c.point = cfg.point * point_l1(p.x.data() + off, p.z.data() + off, *target, cfg.point_normalization);
  c.boundary = cfg.boundary * boundary_l1(p.y_start[q], p.y_end[q], *target, span);
  return c;
}

struct MatchResult {
  std::vector<int> gt_to_pred;  // one query per target
  std::vector<CostTerms> terms;  // per target
  double total_cost = 0.0;       // including the padded rows

  /// Target index of each query or -1.
  std::vector<int> pred_to_gt(int queries) const {
    std::vector<int> out(queries, -1);
    for (std::size_t g = 0; g < gt_to_pred.size(); ++g) out[gt_to_pred[g]] = static_cast<int>(g);
    return out;
  }
};

/// Square cost matrix with the targets padded by non-lanes up to Q rows.
inline std::vector<double> cost_matrix(const PredictionSet& p, const std::vector<LaneTarget>& targets,
                                       const LossConfig& cfg, const Interval& span) {
  const int q = p.count();
  std::vector<double> c(static_cast<std::size_t>(q) * q);
  for (int r = 0; r < q; ++r)
    for (int j = 0; j < q; ++j) {
      const LaneTarget* t = r < static_cast<int>(targets.size()) ? &targets[r] : nullptr;
      c[static_cast<std::size_t>(r) * q + j] = pairwise_cost(p, j, t, cfg, span).total();
    }
  return c;
}

inline MatchResult match_curves(const PredictionSet& p, const std::vector<LaneTarget>& targets, const LossConfig& cfg,
                                const Interval& span) {
  const int q = p.count();
  if (static_cast<int>(targets.size()) > q) {
    throw MatchingError("match_curves: " + std::to_string(targets.size()) + " ground-truth lanes but only " +
                        std::to_string(q) + " queries");
  }
  MatchResult m;
  const auto cost = cost_matrix(p, targets, cfg, span);
  const auto assign = hungarian(cost, q, q, &m.total_cost);
  for (std::size_t g = 0; g < targets.size(); ++g) {
    m.gt_to_pred.push_back(assign[g]);
    m.terms.push_back(pairwise_cost(p, assign[g], &targets[g], cfg, span));
  }
  return m;
}

}  // namespace curvelane
