#pragma once

// Lane detection metrics: point-distance F-score with near/far errors, top-view
// IoU + unilateral Chamfer distance, and per-sequence temporal stability.

#include "curvelane/lane_model.hpp"
#include "curvelane/matching.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalConfig {
  double max_distance = 1.5;  // meters
  double coverage = 0.75;
  double near_far_split = 40.0;
  double confidence = 0.5;
  int grid_points = 100;
  Interval y_range{3.0, 103.0};
  double once_iou = 0.3;
  double once_cd = 0.3;         // meters
  double once_lane_width = 1.0;  // stroke width of top-view lanes, meters
  double once_step = 0.05;       // longitudinal integration step, meters

  void validate() const {
    if (!(max_distance > 0) || !(once_iou > 0) || !(once_cd > 0) || !(once_lane_width > 0) || !(once_step > 0)) {
      throw EvalError("eval: thresholds must be positive");
    }
    if (!(coverage > 0 && coverage <= 1)) throw EvalError("eval.coverage must be in (0, 1]");
    if (grid_points < 2) throw EvalError("eval.grid_points must be >= 2");
    if (!(y_range.lo < y_range.hi)) throw EvalError("eval.y_range must be increasing");
  }

  std::vector<double> grid() const { return uniform_y_positions(grid_points, y_range); }
};

/// A lane sampled on the evaluation grid.
struct EvalLane {
  std::vector<double> x, z;
  std::vector<std::uint8_t> visible;
  std::vector<Vec3> points;  // dense polyline for the Chamfer term
  int category = -1;         // -1: unknown
};

inline EvalLane eval_lane(const GroundTruthLane& gt, const std::vector<double>& ys) {
  EvalLane e;
  const auto r = resample_polyline(gt.points, ys);
  e.x = r.x;
  e.z = r.z;
  e.visible = r.visible;
  for (const auto& p : gt.points)
    if (!ys.empty() && p.y() >= ys.front() && p.y() <= ys.back()) e.points.push_back(p);
  e.category = gt.category;
  return e;
}

inline EvalLane eval_lane(const PolyLane& p, const std::vector<double>& ys, int category = -1) {
  EvalLane e;
  e.category = category;
  for (double y : ys) {
    const bool in = y >= p.y_start && y <= p.y_end;
    e.x.push_back(horner(p.coeffs_x, y));
    e.z.push_back(horner(p.coeffs_z, y));
    e.visible.push_back(in);
    if (in) e.points.emplace_back(e.x.back(), y, e.z.back());
  }
  return e;
}

// ---------------------------------------------------------------------------
// Point-distance F-score

struct PairCloseness {
  bool candidate = false;
  double cost = 0.0;  // mean capped distance over the union of covered positions
};

/// Two lanes match when at least `coverage` of the positions covered by
/// either lane are covered by both with distance below `max_distance`.
inline PairCloseness pair_closeness(const EvalLane& p, const EvalLane& g, const EvalConfig& cfg) {
  int uni = 0, close = 0;
  double cost = 0.0;
  for (std::size_t i = 0; i < p.x.size(); ++i) {
    if (!p.visible[i] && !g.visible[i]) continue;
    ++uni;
    if (p.visible[i] && g.visible[i]) {
      const double d = std::hypot(p.x[i] - g.x[i], p.z[i] - g.z[i]);
      if (d < cfg.max_distance) ++close;
      cost += std::min(d, cfg.max_distance);
    } else {
      cost += cfg.max_distance;
    }
  }
  PairCloseness out;
  if (uni == 0) return out;
  out.candidate = close >= cfg.coverage * uni;
  out.cost = cost / uni;
  return out;
}

/// Largest one-to-one set of candidate pairs, minimum total cost among them.
/// Returns (pred, gt) index pairs.
inline std::vector<std::pair<int, int>> match_candidates(const std::vector<EvalLane>& preds,
                                                         const std::vector<EvalLane>& gts, const EvalConfig& cfg) {
  const int np = static_cast<int>(preds.size()), ng = static_cast<int>(gts.size());
  if (np == 0 || ng == 0) return {};
  // rows = smaller side; non-candidates cost more than any full candidate set
  const bool rows_are_gt = ng <= np;
  const int rows = rows_are_gt ? ng : np, cols = rows_are_gt ? np : ng;
  const double big = 1.0 + cfg.max_distance * (rows + 1);
  std::vector<double> cost(static_cast<std::size_t>(rows) * cols);
  std::vector<std::uint8_t> cand(cost.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int pi = rows_are_gt ? c : r, gi = rows_are_gt ? r : c;
      const auto pc = pair_closeness(preds[pi], gts[gi], cfg);
      const std::size_t k = static_cast<std::size_t>(r) * cols + c;
      cand[k] = pc.candidate;
      cost[k] = pc.candidate ? pc.cost : big;
    }
  const auto assign = hungarian(cost, rows, cols);
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < rows; ++r) {
    const int c = assign[r];
    if (!cand[static_cast<std::size_t>(r) * cols + c]) continue;
    out.emplace_back(rows_are_gt ? c : r, rows_are_gt ? r : c);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct OpenLaneResult {
  double f1 = 0, precision = 0, recall = 0;
  double x_err_near = 0, x_err_far = 0, z_err_near = 0, z_err_far = 0;
  double category_accuracy = std::numeric_limits<double>::quiet_NaN();
  int true_positives = 0, num_pred = 0, num_gt = 0;
  bool empty_convention = false;  // no lanes on either side: F1 set to 1
};

inline EvalConfig validated(EvalConfig cfg) {
  cfg.validate();
  return cfg;
}

/// Accumulates frames; rates and errors are pooled over the whole set.
class OpenLaneAccumulator {
 public:
  explicit OpenLaneAccumulator(EvalConfig cfg) : cfg_(validated(std::move(cfg))), ys_(cfg_.grid()) {}

  const std::vector<double>& grid() const { return ys_; }
  const EvalConfig& config() const { return cfg_; }

  /// Returns the matched (pred, gt) pairs of this frame.
  std::vector<std::pair<int, int>> add(const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts) {
    const auto pairs = match_candidates(preds, gts, cfg_);
    tp_ += static_cast<int>(pairs.size());
    np_ += static_cast<int>(preds.size());
    ng_ += static_cast<int>(gts.size());
    for (const auto& [pi, gi] : pairs) {
      const auto& p = preds[pi];
      const auto& g = gts[gi];
      double sx[2] = {0, 0}, sz[2] = {0, 0};
      int cnt[2] = {0, 0};
      for (std::size_t i = 0; i < ys_.size(); ++i) {
        if (!p.visible[i] || !g.visible[i]) continue;
        const int band = ys_[i] < cfg_.near_far_split ? 0 : 1;
        sx[band] += std::abs(p.x[i] - g.x[i]);
        sz[band] += std::abs(p.z[i] - g.z[i]);
        ++cnt[band];
      }
      for (int b = 0; b < 2; ++b) {
        if (!cnt[b]) continue;
        ex_[b] += sx[b] / cnt[b];
        ez_[b] += sz[b] / cnt[b];
        ++pairs_[b];
      }
      if (p.category >= 0) {
        ++cat_total_;
        cat_hit_ += p.category == g.category;
      }
    }
    return pairs;
  }

  OpenLaneResult result() const {
    OpenLaneResult r;
    r.true_positives = tp_;
    r.num_pred = np_;
    r.num_gt = ng_;
    if (np_ == 0 && ng_ == 0) {
      r.f1 = r.precision = r.recall = 1.0;
      r.empty_convention = true;
    } else {
      r.precision = np_ ? static_cast<double>(tp_) / np_ : 0.0;
      r.recall = ng_ ? static_cast<double>(tp_) / ng_ : 0.0;
      r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    }
    r.x_err_near = pairs_[0] ? ex_[0] / pairs_[0] : 0.0;
    r.x_err_far = pairs_[1] ? ex_[1] / pairs_[1] : 0.0;
    r.z_err_near = pairs_[0] ? ez_[0] / pairs_[0] : 0.0;
    r.z_err_far = pairs_[1] ? ez_[1] / pairs_[1] : 0.0;
    if (cat_total_) r.category_accuracy = static_cast<double>(cat_hit_) / cat_total_;
    return r;
  }

 private:
  EvalConfig cfg_;
  std::vector<double> ys_;
  int tp_ = 0, np_ = 0, ng_ = 0;
  double ex_[2] = {0, 0}, ez_[2] = {0, 0};
  int pairs_[2] = {0, 0};
  int cat_total_ = 0, cat_hit_ = 0;
};

/// Single-frame convenience wrapper.
inline OpenLaneResult openlane_evaluate(const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts,
                                        const EvalConfig& cfg) {
  OpenLaneAccumulator acc(cfg);
  acc.add(preds, gts);
  return acc.result();
}

// ---------------------------------------------------------------------------
// Top-view IoU and unilateral Chamfer distance

/// Top-view footprint of a lane: at each longitudinal position y, the
/// interval of x covered by a stroke of the configured width around the
/// x-y polyline.
struct Footprint {
  double y0 = 0, y1 = 0;
  std::vector<Vec2> xy;  // polyline sorted by y

  bool covers(double y) const { return y >= y0 && y <= y1 && xy.size() >= 2; }

  /// Center x and local slope dx/dy at y.
  std::pair<double, double> at(double y) const {
    std::size_t j = 0;
    while (j + 2 < xy.size() && xy[j + 1].y() < y) ++j;
    const Vec2& a = xy[j];
    const Vec2& b = xy[j + 1];
    const double dy = b.y() - a.y();
    const double slope = dy > 0 ? (b.x() - a.x()) / dy : 0.0;
    return {a.x() + slope * (y - a.y()), slope};
  }
};

inline Footprint footprint(const std::vector<Vec3>& pts) {
  Footprint f;
  for (const auto& p : pts) f.xy.emplace_back(p.x(), p.y());
  std::stable_sort(f.xy.begin(), f.xy.end(), [](const Vec2& a, const Vec2& b) { return a.y() < b.y(); });
  if (!f.xy.empty()) {
    f.y0 = f.xy.front().y();
    f.y1 = f.xy.back().y();
  }
  return f;
}

/// IoU of two stroked top-view lanes, integrated along y.
inline double topview_iou(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double width, double step) {
  const Footprint fa = footprint(a), fb = footprint(b);
  if (fa.xy.size() < 2 || fb.xy.size() < 2) return 0.0;
  const double lo = std::min(fa.y0, fb.y0), hi = std::max(fa.y1, fb.y1);
  double inter = 0.0, uni = 0.0;
  const int steps = std::max(1, static_cast<int>(std::ceil((hi - lo) / step)));
  const double dy = (hi - lo) / steps;
  for (int i = 0; i < steps; ++i) {
    const double y = lo + (i + 0.5) * dy;
    double al = 0, ar = 0, bl = 0, br = 0;
    const bool ia = fa.covers(y), ib = fb.covers(y);
    if (ia) {
      const auto [x, s] = fa.at(y);
      const double h = 0.5 * width * std::sqrt(1 + s * s);
      al = x - h;
      ar = x + h;
    }
    if (ib) {
      const auto [x, s] = fb.at(y);
      const double h = 0.5 * width * std::sqrt(1 + s * s);
      bl = x - h;
      br = x + h;
    }
    const double la = ia ? ar - al : 0.0, lb = ib ? br - bl : 0.0;
    const double ov = ia && ib ? std::max(0.0, std::min(ar, br) - std::max(al, bl)) : 0.0;
    inter += ov;
    uni += la + lb - ov;
  }
  return uni > 0 ? inter / uni : 0.0;
}

/// Mean over predicted points of the distance to the nearest ground-truth point.
inline double unilateral_chamfer(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
  if (pred.empty() || gt.empty()) return std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (const auto& p : pred) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gt) best = std::min(best, (p - g).squaredNorm());
    s += std::sqrt(best);
  }
  return s / static_cast<double>(pred.size());
}

struct OnceResult {
  double f1 = 0, precision = 0, recall = 0;
  double mean_cd_error = 0;
  int true_positives = 0, num_pred = 0, num_gt = 0;
  bool empty_convention = false;
};

class OnceAccumulator {
 public:
  explicit OnceAccumulator(EvalConfig cfg) : cfg_(validated(std::move(cfg))) {}

  void add(const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts) {
    np_ += static_cast<int>(preds.size());
    ng_ += static_cast<int>(gts.size());
    const int np = static_cast<int>(preds.size()), ng = static_cast<int>(gts.size());
    if (!np || !ng) return;
    // stage 1: one-to-one on IoU among pairs above the threshold
    const bool rows_are_gt = ng <= np;
    const int rows = rows_are_gt ? ng : np, cols = rows_are_gt ? np : ng;
    std::vector<double> cost(static_cast<std::size_t>(rows) * cols);
    std::vector<double> iou(cost.size());
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int pi = rows_are_gt ? c : r, gi = rows_are_gt ? r : c;
        const std::size_t k = static_cast<std::size_t>(r) * cols + c;
        iou[k] = topview_iou(preds[pi].points, gts[gi].points, cfg_.once_lane_width, cfg_.once_step);
        cost[k] = iou[k] > cfg_.once_iou ? -iou[k] : 1.0;
      }
    const auto assign = hungarian(cost, rows, cols);
    // stage 2: Chamfer distance on the candidates
    for (int r = 0; r < rows; ++r) {
      const int c = assign[r];
      if (!(iou[static_cast<std::size_t>(r) * cols + c] > cfg_.once_iou)) continue;
      const int pi = rows_are_gt ? c : r, gi = rows_are_gt ? r : c;
      const double cd = unilateral_chamfer(preds[pi].points, gts[gi].points);
      if (cd < cfg_.once_cd) {
        ++tp_;
        cd_sum_ += cd;
      }
    }
  }

  OnceResult result() const {
    OnceResult r;
    r.true_positives = tp_;
    r.num_pred = np_;
    r.num_gt = ng_;
    if (np_ == 0 && ng_ == 0) {
      r.f1 = r.precision = r.recall = 1.0;
      r.empty_convention = true;
      return r;
    }
    r.precision = np_ ? static_cast<double>(tp_) / np_ : 0.0;
    r.recall = ng_ ? static_cast<double>(tp_) / ng_ : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    r.mean_cd_error = tp_ ? cd_sum_ / tp_ : 0.0;
    return r;
  }

 private:
  EvalConfig cfg_;
  int tp_ = 0, np_ = 0, ng_ = 0;
  double cd_sum_ = 0.0;
};

inline OnceResult once_evaluate(const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts,
                                const EvalConfig& cfg) {
  OnceAccumulator acc(cfg);
  acc.add(preds, gts);
  return acc.result();
}

// ---------------------------------------------------------------------------
// Stability

/// Population standard deviation. Shifted by the first value so a constant
/// series gives exactly zero.
inline double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x - v[0];
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - v[0] - mean) * (x - v[0] - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

struct SequenceStability {
  std::string sequence_id;
  std::vector<double> dist_x;      // per evaluated frame, meters
  std::vector<int> skipped_frames;  // frames without any matched lane
  double f_stab = 0.0;
};

struct StabilityReport {
  std::vector<SequenceStability> sequences;
  double mean_f_stab = 0.0;  // over sequences with at least one evaluated frame
};

/// Mean lateral disparity over matched lanes and jointly covered grid
/// positions of one frame; NaN when nothing matched.
inline double frame_dist_x(const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts,
                           const EvalConfig& cfg) {
  const auto pairs = match_candidates(preds, gts, cfg);
  double s = 0.0;
  int n = 0;
  for (const auto& [pi, gi] : pairs) {
    for (std::size_t i = 0; i < preds[pi].x.size(); ++i) {
      if (!preds[pi].visible[i] || !gts[gi].visible[i]) continue;
      s += std::abs(preds[pi].x[i] - gts[gi].x[i]);
      ++n;
    }
  }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

inline SequenceStability stability_of_series(std::string id, const std::vector<double>& per_frame) {
  SequenceStability s;
  s.sequence_id = std::move(id);
  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    if (std::isnan(per_frame[f])) {
      s.skipped_frames.push_back(static_cast<int>(f));
    } else {
      s.dist_x.push_back(per_frame[f]);
    }
  }
  // no evaluated frame: undefined, reported as null
  s.f_stab = s.dist_x.empty() ? std::numeric_limits<double>::quiet_NaN() : population_std(s.dist_x);
  return s;
}

/// Frames of one sequence: predictions and ground truths per frame.
inline SequenceStability stability_evaluate(const std::string& id, const std::vector<std::vector<EvalLane>>& preds,
                                            const std::vector<std::vector<EvalLane>>& gts, const EvalConfig& cfg) {
  if (preds.size() != gts.size()) throw EvalError("stability: prediction and ground-truth frame counts differ");
  if (preds.size() < 2) throw EvalError("stability: a sequence needs at least 2 frames");
  std::vector<double> series;
  for (std::size_t f = 0; f < preds.size(); ++f) series.push_back(frame_dist_x(preds[f], gts[f], cfg));
  return stability_of_series(id, series);
}

inline StabilityReport summarize_stability(std::vector<SequenceStability> seqs) {
  StabilityReport r;
  r.sequences = std::move(seqs);
  int n = 0;
  for (const auto& s : r.sequences) {
    if (std::isnan(s.f_stab)) continue;
    r.mean_f_stab += s.f_stab;
    ++n;
  }
  r.mean_f_stab = n ? r.mean_f_stab / n : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {
inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
}  // namespace detail

inline nlohmann::json to_json(const OpenLaneResult& r) {
  nlohmann::json j;
  j["F1"] = r.f1;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["x_err_near"] = r.x_err_near;
  j["x_err_far"] = r.x_err_far;
  j["z_err_near"] = r.z_err_near;
  j["z_err_far"] = r.z_err_far;
  j["category_accuracy"] = detail::number_or_null(r.category_accuracy);
  j["true_positives"] = r.true_positives;
  j["num_pred"] = r.num_pred;
  j["num_gt"] = r.num_gt;
  j["metadata"] = {{"empty_f1_convention", r.empty_convention}};
  return j;
}

inline nlohmann::json to_json(const OnceResult& r) {
  nlohmann::json j;
  j["F1"] = r.f1;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["mean_CD_error"] = r.mean_cd_error;
  j["true_positives"] = r.true_positives;
  j["num_pred"] = r.num_pred;
  j["num_gt"] = r.num_gt;
  j["metadata"] = {{"empty_f1_convention", r.empty_convention}};
  return j;
}

inline nlohmann::json to_json(const StabilityReport& r) {
  nlohmann::json j;
  j["mean_F_stab"] = detail::number_or_null(r.mean_f_stab);
  j["sequences"] = nlohmann::json::array();
  for (const auto& s : r.sequences) {
    j["sequences"].push_back(
        {{"sequence_id", s.sequence_id}, {"dist_x", s.dist_x}, {"F_stab", detail::number_or_null(s.f_stab)}, {"skipped_frames", s.skipped_frames}});
  }
  return j;
}

/// Flat metric table: one `metric,value` row per scalar.
inline std::string metrics_csv(const nlohmann::json& report) {
  std::ostringstream out;
  out << "metric,value\n";
  auto walk = [&](auto&& self, const nlohmann::json& j, const std::string& prefix) -> void {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (it->is_object()) {
        self(self, *it, key);
      } else if (it->is_number() || it->is_boolean()) {
        out << key << "," << it->dump() << "\n";
      } else if (it->is_null()) {
        out << key << ",\n";
      }
    }
  };
  walk(walk, report, "");
  return out.str();
}

}  // namespace curvelane
