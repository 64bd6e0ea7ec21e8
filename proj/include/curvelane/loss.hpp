#pragma once

// Training objective: curve loss on the head outputs, deep supervision of the
// refined anchors of every decoder layer, and the auxiliary segmentation loss.

#include "curvelane/image.hpp"
#include "curvelane/matching.hpp"
#include "curvelane/network.hpp"

#include <vector>

namespace curvelane {

template <class S>
struct LossTerms {
  Tensor<S> total, curve, query, seg;
};

namespace detail {
template <class S>
std::vector<S> cast(const std::vector<double>& v) {
  return {v.begin(), v.end()};
}

}  // namespace detail

/// Detached view of the head outputs for matching.
template <class S>
PredictionSet prediction_set(const HeadOutput<S>& h) {
  PredictionSet p;
  for (S l : h.logits.values()) p.prob.push_back(ag::sigmoid_value(static_cast<double>(l)));
  p.x = as_doubles(h.sampled_x);
  p.z = as_doubles(h.sampled_z);
  p.y_start = as_doubles(h.y_start);
  p.y_end = as_doubles(h.y_end);
  p.points = h.sampled_x.dim(1);
  return p;
}

/// Segmentation target at feature resolution: a cell is positive when any
/// mask pixel inside its stride x stride block is set.
inline Mask downsample_mask(const Mask& m, int stride, int out_h, int out_w) {
  Mask out(out_h, out_w);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        const int rr = r / stride, cc = c / stride;
        if (rr < out_h && cc < out_w) out.at(rr, cc) = 1;
      }
  return out;
}

/// Pixel-mean binary cross-entropy with a positive-class weight.
template <class S>
Tensor<S> seg_loss(const Tensor<S>& logits, const Mask& target, const LossConfig& cfg) {
  if (logits.size() != target.data.size() || (logits.rank() == 3 && (logits.dim(1) != target.height ||
                                                                     logits.dim(2) != target.width))) {
    throw ag::ShapeError("seg_loss: logits " + ag::shape_str(logits.shape()) + " vs mask " +
                         std::to_string(target.height) + "x" + std::to_string(target.width));
  }
  const double inv = 1.0 / static_cast<double>(target.data.size());
  std::vector<double> w(target.data.size());
  std::vector<std::uint8_t> t(target.data.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    t[i] = target.data[i] != 0;
    w[i] = (t[i] ? cfg.seg_pos_weight : 1.0) * inv;
  }
  return ag::bce_with_logits(logits, t, detail::cast<S>(w), S(cfg.log_eps));
}

namespace detail {

/// Per-point targets and weights for matched queries; unmatched rows get
/// zero weight.
struct PointSupervision {
  std::vector<double> tx, tz, w;
  std::vector<double> ts, te, wb;
};

inline PointSupervision point_supervision(const MatchResult& m, const std::vector<LaneTarget>& targets, int q, int n,
                                          double point_weight, double boundary_weight, PointNormalization norm,
                                          const Interval& span) {
  PointSupervision s;
  s.tx.assign(static_cast<std::size_t>(q) * n, 0.0);
  s.tz = s.tx;
  s.w = s.tx;
  s.ts.assign(q, 0.0);
  s.te = s.ts;
  s.wb = s.ts;
  for (std::size_t g = 0; g < m.gt_to_pred.size(); ++g) {
    const int p = m.gt_to_pred[g];
    const auto& t = targets[g];
    const int cnt = t.visible_count();
    const double pw = norm == PointNormalization::mean ? point_weight / std::max(cnt, 1) : point_weight;
    for (int i = 0; i < n; ++i) {
      const std::size_t k = static_cast<std::size_t>(p) * n + i;
      s.tx[k] = t.x[i];
      s.tz[k] = t.z[i];
      s.w[k] = t.visible[i] ? pw : 0.0;
    }
    s.ts[p] = t.y_start;
    s.te[p] = t.y_end;
    s.wb[p] = boundary_weight / span.span();
  }
  return s;
}

template <class S>
Tensor<S> geometry_l1(const Tensor<S>& x, const Tensor<S>& z, const Tensor<S>& ys, const Tensor<S>& ye,
                      const PointSupervision& s) {
  return ag::add_all<S>({ag::weighted_l1(x, cast<S>(s.tx), cast<S>(s.w)), ag::weighted_l1(z, cast<S>(s.tz), cast<S>(s.w)),
                         ag::weighted_l1(ys, cast<S>(s.ts), cast<S>(s.wb)), ag::weighted_l1(ye, cast<S>(s.te), cast<S>(s.wb))});
}

}  // namespace detail

/// Classification plus matched point and boundary terms on the head outputs.
template <class S>
Tensor<S> curve_loss(const HeadOutput<S>& h, const std::vector<LaneTarget>& targets, const MatchResult& m,
                     const LossConfig& cfg, const Interval& span) {
  const int q = h.logits.dim(0), n = h.sampled_x.dim(1);
  std::vector<std::uint8_t> labels(q, 0);
  for (int p : m.gt_to_pred) labels[p] = 1;
  const Tensor<S> cls = ag::bce_with_logits(h.logits, labels, std::vector<S>(q, S(cfg.cls)), S(cfg.log_eps));
  const auto sup = detail::point_supervision(m, targets, q, n, cfg.point, cfg.boundary, cfg.point_normalization, span);
  return ag::add(cls, detail::geometry_l1(h.sampled_x, h.sampled_z, h.y_start, h.y_end, sup));
}

/// Deep supervision of every layer's refined anchors and range.
template <class S>
Tensor<S> query_loss(const std::vector<LayerTrace<S>>& layers, const std::vector<LaneTarget>& targets,
                     const MatchResult& m, const LossConfig& cfg, const Interval& span, double softplus_beta) {
  std::vector<Tensor<S>> parts;
  for (const auto& l : layers) {
    const auto& st = l.state;
    const auto sup = detail::point_supervision(m, targets, st.count(), st.x.dim(1), cfg.query_point,
                                               cfg.query_boundary, cfg.point_normalization, span);
    const auto [ys, ye] = range_to_boundary(st.start, st.end, span, softplus_beta);
    parts.push_back(detail::geometry_l1(st.x, st.z, ys, ye, sup));
  }
  return ag::add_all(parts);
}

/// Full objective for one frame. Matching runs on the detached final-layer
/// predictions unless `match` is supplied.
template <class S>
LossTerms<S> frame_loss(const FrameOutput<S>& out, const std::vector<LaneTarget>& targets, const Mask& seg_target,
                        const ModelConfig& model, const LossConfig& cfg, const MatchResult* match = nullptr,
                        MatchResult* match_out = nullptr) {
  const Interval& span = model.box.y;
  const MatchResult m = match ? *match : match_curves(prediction_set(out.head), targets, cfg, span);
  LossTerms<S> t;
  t.curve = curve_loss(out.head, targets, m, cfg, span);
  t.query = query_loss(out.layers, targets, m, cfg, span, model.range_softplus_beta);
  t.seg = ag::scale(seg_loss(out.seg_logits, seg_target, cfg), S(cfg.seg_weight));
  t.total = ag::add_all<S>({t.curve, t.query, t.seg});
  if (match_out) *match_out = m;
  return t;
}

}  // namespace curvelane
