#pragma once

// Cross-frame propagation of curve queries and anchor point sets.

#include "curvelane/geometry.hpp"
#include "curvelane/lane_model.hpp"
#include "curvelane/network.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

enum class FusionVariant {
  none,
  anchors,            // replace initial anchors with propagated ones
  query_sa,           // attend from current queries to stored queries
  topk_query,         // append the most confident stored queries
  topk_query_anchors  // as topk_query, carrying their propagated anchors
};

inline const char* to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::none: return "none";
    case FusionVariant::anchors: return "anchors";
    case FusionVariant::query_sa: return "query_sa";
    case FusionVariant::topk_query: return "topk_query";
    case FusionVariant::topk_query_anchors: return "topk_query_anchors";
  }
  return "?";
}

inline FusionVariant fusion_variant_from_string(const std::string& s) {
  for (auto v : {FusionVariant::none, FusionVariant::anchors, FusionVariant::query_sa, FusionVariant::topk_query,
                 FusionVariant::topk_query_anchors}) {
    if (s == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown fusion variant '" + s + "'");
}

struct FusionConfig {
  FusionVariant variant = FusionVariant::none;
  int top_k = 6;
  int history_len = 2;

  void validate() const {
    if (top_k < 0) throw std::invalid_argument("fusion.top_k must be >= 0");
    if (history_len < 1) throw std::invalid_argument("fusion.history_len must be >= 1");
  }
};

/// What one frame leaves behind for the following frames. All values are
/// plain numbers: nothing stored here carries gradients.
struct MemoryEntry {
  int frame = 0;
  int queries = 0, dim = 0, points = 0;
  std::vector<double> content;     // {Q, D}
  std::vector<double> x, z;        // {Q, N} at the fixed y positions
  std::vector<double> start, end;  // {Q}
  std::vector<double> confidence;  // {Q}
  EgoMotion to_latest;             // this frame's ground -> latest frame's ground
};

template <class S>
MemoryEntry make_memory_entry(const FrameOutput<S>& out, int frame) {
  const auto& st = out.layers.back().state;
  MemoryEntry e;
  e.frame = frame;
  e.queries = st.count();
  e.dim = out.content.dim(1);
  e.points = st.x.dim(1);
  e.content = as_doubles(out.content);
  e.x = as_doubles(st.x);
  e.z = as_doubles(st.z);
  e.start = as_doubles(st.start);
  e.end = as_doubles(st.end);
  for (S l : out.head.logits.values()) e.confidence.push_back(ag::sigmoid_value(static_cast<double>(l)));
  return e;
}

/// Stored frames, oldest first.
class TemporalMemory {
 public:
  explicit TemporalMemory(int history_len = 2) : history_len_(history_len) {
    if (history_len < 1) throw std::invalid_argument("TemporalMemory: history length must be >= 1");
  }

  int depth() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  const std::deque<MemoryEntry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// The ego frame moved by `motion` (previous ground -> current ground).
  void advance(const EgoMotion& motion) {
    for (auto& e : entries_) e.to_latest = e.to_latest.then(motion);
  }

  /// Stores the current frame (identity transform) and evicts the oldest
  /// entries beyond the history length.
  void push(MemoryEntry e) {
    e.to_latest = EgoMotion();
    entries_.push_back(std::move(e));
    while (depth() > history_len_) entries_.pop_front();
  }

 private:
  int history_len_;
  std::deque<MemoryEntry> entries_;
};

/// Moves one stored anchor set into the current ground frame, re-samples it
/// on the fixed y positions (linear extrapolation past the ends) and clamps
/// it to the world box.
inline std::pair<std::vector<double>, std::vector<double>> propagate_anchor_set(const double* x, const double* z,
                                                                                const std::vector<double>& ys,
                                                                                const EgoMotion& motion,
                                                                                const WorldBox& box) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < ys.size(); ++i) pts.emplace_back(x[i], ys[i], z[i]);
  pts = transform_points_ego(pts, motion);
  std::stable_sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) { return a.y() < b.y(); });
  const auto r = resample_polyline(pts, ys, true);
  std::pair<std::vector<double>, std::vector<double>> out{r.x, r.z};
  for (auto& v : out.first) v = box.x.clamp(v);
  for (auto& v : out.second) v = box.z.clamp(v);
  return out;
}

/// Indices of the k largest confidences, descending; ties keep the lower
/// index first.
inline std::vector<int> select_top_k(const std::vector<double>& confidence, int k) {
  std::vector<int> idx(confidence.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return confidence[a] > confidence[b]; });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

struct FusionInfo {
  int propagated = 0;          // queries appended to the current set
  bool truncated = false;      // fewer stored queries than top_k
  std::vector<int> selected;   // flattened indices, newest entry first
};

namespace detail {

template <class S>
Tensor<S> constant_rows(const std::vector<double>& v, int rows, int cols) {
  return Tensor<S>::constant({rows, cols}, std::vector<S>(v.begin(), v.end()));
}

}  // namespace detail

/// Builds the decoder's initial state for the current frame from the model's
/// learned initial queries and the memory.
template <class S>
QueryState<S> fuse_memory(const Model<S>& model, const TemporalMemory& mem, const FusionConfig& cfg,
                          FusionInfo* info = nullptr) {
  QueryState<S> init = model.initial_state();
  if (info) *info = FusionInfo{};
  if (cfg.variant == FusionVariant::none || mem.empty()) return init;
  const auto& mc = model.config();
  const int lq = mc.queries, n = mc.anchors, d = mc.dim;
  const auto& ys = model.y_positions();

  switch (cfg.variant) {
    case FusionVariant::none: return init;

    case FusionVariant::anchors: {
      const MemoryEntry& e = mem.entries().back();
      std::vector<double> x = as_doubles(init.x), z = as_doubles(init.z);
      for (int q = 0; q < std::min(lq, e.queries); ++q) {
        const auto [px, pz] = propagate_anchor_set(&e.x[q * n], &e.z[q * n], ys, e.to_latest, mc.box);
        std::copy(px.begin(), px.end(), x.begin() + q * n);
        std::copy(pz.begin(), pz.end(), z.begin() + q * n);
      }
      init.x = detail::constant_rows<S>(x, lq, n);
      init.z = detail::constant_rows<S>(z, lq, n);
      return init;
    }

    case FusionVariant::query_sa: {
      std::vector<double> hist;
      int rows = 0;
      for (const auto& e : mem.entries()) {
        hist.insert(hist.end(), e.content.begin(), e.content.end());
        rows += e.queries;
      }
      const Tensor<S> h = detail::constant_rows<S>(hist, rows, d);
      init.content = ag::add(init.content, model.temporal_attention()(init.content, h, h));
      return init;
    }

    case FusionVariant::topk_query:
    case FusionVariant::topk_query_anchors: {
      // flatten newest entry first
      std::vector<const MemoryEntry*> owner;
      std::vector<int> local;
      std::vector<double> conf;
      for (auto it = mem.entries().rbegin(); it != mem.entries().rend(); ++it) {
        for (int q = 0; q < it->queries; ++q) {
          owner.push_back(&*it);
          local.push_back(q);
          conf.push_back(it->confidence[q]);
        }
      }
      const auto sel = select_top_k(conf, cfg.top_k);
      if (info) {
        info->selected = sel;
        info->propagated = static_cast<int>(sel.size());
        info->truncated = static_cast<int>(conf.size()) < cfg.top_k;
      }
      if (sel.empty()) return init;
      const int k = static_cast<int>(sel.size());
      const bool carry = cfg.variant == FusionVariant::topk_query_anchors;
      std::vector<double> content, x, z, start, end;
      std::vector<int> rows;
      for (int i : sel) {
        const MemoryEntry& e = *owner[i];
        const int q = local[i];
        content.insert(content.end(), e.content.begin() + q * d, e.content.begin() + (q + 1) * d);
        rows.push_back(q % lq);
        if (!carry) continue;
        const auto [px, pz] = propagate_anchor_set(&e.x[q * n], &e.z[q * n], ys, e.to_latest, mc.box);
        x.insert(x.end(), px.begin(), px.end());
        z.insert(z.end(), pz.begin(), pz.end());
        start.push_back(e.start[q]);
        end.push_back(e.end[q]);
      }
      QueryState<S> prop;
      prop.content = detail::constant_rows<S>(content, k, d);
      if (carry) {
        prop.x = detail::constant_rows<S>(x, k, n);
        prop.z = detail::constant_rows<S>(z, k, n);
        prop.start = detail::constant_rows<S>(start, k, 1);
        prop.end = detail::constant_rows<S>(end, k, 1);
      } else {
        // same-index initial anchors and ranges
        prop.x = ag::gather_rows(init.x, rows);
        prop.z = ag::gather_rows(init.z, rows);
        prop.start = ag::gather_rows(init.start, rows);
        prop.end = ag::gather_rows(init.end, rows);
      }
      QueryState<S> all = concat_states(init, prop);
      const Tensor<S> att = model.temporal_attention()(all.content, all.content, all.content);
      all.content = model.temporal_norm()(ag::add(all.content, att));
      return all;
    }
  }
  return init;
}

/// Streaming inference over one sequence: advances the memory by each
/// frame's ego motion, fuses, decodes and stores the frame.
template <class S>
FrameOutput<S> fused_forward(const Model<S>& model, TemporalMemory& mem, const FusionConfig& cfg, const Image& img,
                             const CameraRig& rig, const EgoMotion& motion_from_prev, int frame,
                             FusionInfo* info = nullptr) {
  mem.advance(motion_from_prev);
  const QueryState<S> init = fuse_memory(model, mem, cfg, info);
  FrameOutput<S> out = model.decode(model.encode(img), rig, init);
  if (cfg.variant != FusionVariant::none) mem.push(make_memory_entry(out, frame));
  return out;
}

}  // namespace curvelane
