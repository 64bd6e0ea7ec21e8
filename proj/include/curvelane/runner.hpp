#pragma once

// Glue between datasets, the model and the metric suite: sample
// preparation, inference over sequences and metric reports.

#include "curvelane/config.hpp"
#include "curvelane/dataset_io.hpp"
#include "curvelane/evaluation.hpp"
#include "curvelane/loss.hpp"
#include "curvelane/temporal.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace curvelane {

/// The sequences a run works on: loaded from disk or generated in memory.
inline std::vector<Sequence> load_or_generate(const DataConfig& data) {
  if (!data.dataset.empty()) return load_dataset(data.dataset);
  std::vector<Sequence> out;
  for (int s = 0; s < data.sequences; ++s) {
    Sequence seq;
    seq.frames = generate_sequence(data.scene, data.frames, s);
    seq.sequence_id = seq.frames.front().sequence_id;
    out.push_back(std::move(seq));
  }
  return out;
}

/// Supervision for one frame, precomputed once.
struct TrainFrame {
  const FrameSample* frame = nullptr;
  std::vector<LaneTarget> targets;
  Mask seg_target;
};

inline TrainFrame prepare_frame(const FrameSample& f, const ModelConfig& mc) {
  TrainFrame t;
  t.frame = &f;
  t.targets = make_targets(f.lanes, mc.y_positions(), mc.box.y);
  const auto e = mc.level_extent(0);
  t.seg_target = downsample_mask(f.seg_mask, mc.level_stride(0), e.height, e.width);
  return t;
}

inline std::vector<EvalLane> gt_eval_lanes(const std::vector<GroundTruthLane>& lanes, const std::vector<double>& ys) {
  std::vector<EvalLane> out;
  for (const auto& l : lanes) {
    if (!l.is_lane || l.points.size() < 2) continue;
    auto e = eval_lane(l, ys);
    if (std::count(e.visible.begin(), e.visible.end(), 1) == 0) continue;
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<EvalLane> pred_eval_lanes(const std::vector<PolyLane>& lanes, const std::vector<double>& ys,
                                             double confidence) {
  std::vector<EvalLane> out;
  for (const auto& l : lanes) {
    if (l.confidence < confidence) continue;
    auto e = eval_lane(l, ys);
    if (std::count(e.visible.begin(), e.visible.end(), 1) == 0) continue;
    out.push_back(std::move(e));
  }
  return out;
}

/// Predicted lanes of every frame, sequences processed independently with a
/// fresh memory each.
template <class S>
std::vector<std::vector<std::vector<PolyLane>>> predict_sequences(const Model<S>& model, const FusionConfig& fusion,
                                                                  const std::vector<Sequence>& seqs) {
  ag::NoGradGuard ng;
  std::vector<std::vector<std::vector<PolyLane>>> out;
  for (const auto& seq : seqs) {
    TemporalMemory mem(fusion.history_len);
    std::vector<std::vector<PolyLane>> frames;
    for (const auto& f : seq.frames) {
      const auto o = fused_forward(model, mem, fusion, f.image, f.rig, f.ego_motion_from_prev, f.index);
      frames.push_back(to_poly_lanes(o.head, model.config().box.y));
    }
    out.push_back(std::move(frames));
  }
  return out;
}

struct MetricReport {
  OpenLaneResult openlane;
  OnceResult once;
  StabilityReport stability;
  std::vector<std::string> notes;
};

using FrameLanes = std::vector<std::vector<EvalLane>>;  // frame -> lanes

/// Scores per-sequence, per-frame predictions against ground truth.
inline MetricReport evaluate_lanes(const std::vector<FrameLanes>& preds, const std::vector<FrameLanes>& gts,
                                   const std::vector<std::string>& ids, const EvalConfig& cfg) {
  if (preds.size() != gts.size() || ids.size() != gts.size()) throw EvalError("sequence counts differ");
  OpenLaneAccumulator ol(cfg);
  OnceAccumulator once(cfg);
  MetricReport r;
  std::vector<SequenceStability> stab;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    if (preds[s].size() != gts[s].size()) throw EvalError("frame count differs in " + ids[s]);
    for (std::size_t f = 0; f < gts[s].size(); ++f) {
      ol.add(preds[s][f], gts[s][f]);
      once.add(preds[s][f], gts[s][f]);
    }
    if (gts[s].size() >= 2) {
      stab.push_back(stability_evaluate(ids[s], preds[s], gts[s], cfg));
      if (!stab.back().skipped_frames.empty()) {
        r.notes.push_back(ids[s] + ": " + std::to_string(stab.back().skipped_frames.size()) +
                          " frame(s) without matches left out of the stability series");
      }
    } else {
      r.notes.push_back(ids[s] + ": single frame, no stability series");
    }
  }
  r.openlane = ol.result();
  r.once = once.result();
  r.stability = summarize_stability(std::move(stab));
  if (r.openlane.empty_convention) r.notes.push_back("no lanes predicted or annotated: F1 set to 1 by convention");
  return r;
}

inline std::vector<FrameLanes> gt_lanes_of(const std::vector<Sequence>& seqs, const std::vector<double>& ys) {
  std::vector<FrameLanes> out;
  for (const auto& s : seqs) {
    FrameLanes fl;
    for (const auto& f : s.frames) fl.push_back(gt_eval_lanes(f.lanes, ys));
    out.push_back(std::move(fl));
  }
  return out;
}

inline std::vector<std::string> sequence_ids(const std::vector<Sequence>& seqs) {
  std::vector<std::string> out;
  for (const auto& s : seqs) out.push_back(s.sequence_id);
  return out;
}

/// Model predictions (sequence -> frame -> lanes) against the sequences.
inline MetricReport evaluate_predictions(const std::vector<std::vector<std::vector<PolyLane>>>& preds,
                                         const std::vector<Sequence>& seqs, const EvalConfig& cfg) {
  const auto ys = cfg.grid();
  std::vector<FrameLanes> ps;
  for (const auto& seq : preds) {
    FrameLanes fl;
    for (const auto& f : seq) fl.push_back(pred_eval_lanes(f, ys, cfg.confidence));
    ps.push_back(std::move(fl));
  }
  return evaluate_lanes(ps, gt_lanes_of(seqs, ys), sequence_ids(seqs), cfg);
}

/// Ground truth scored against itself.
inline MetricReport evaluate_oracle(const std::vector<Sequence>& seqs, const EvalConfig& cfg) {
  const auto gts = gt_lanes_of(seqs, cfg.grid());
  return evaluate_lanes(gts, gts, sequence_ids(seqs), cfg);
}

inline nlohmann::json to_json(const MetricReport& r, const nlohmann::json& config_echo) {
  nlohmann::json j;
  j["openlane"] = to_json(r.openlane);
  j["once"] = to_json(r.once);
  j["stability"] = to_json(r.stability);
  j["notes"] = r.notes;
  j["config"] = config_echo;
  return j;
}

/// Scalar metrics only; the per-sequence series go to their own table.
inline std::string metric_report_csv(const MetricReport& r) {
  nlohmann::json flat;
  flat["openlane"] = to_json(r.openlane);
  flat["once"] = to_json(r.once);
  flat["stability"] = {{"mean_F_stab", detail::number_or_null(r.stability.mean_f_stab)}};
  return metrics_csv(flat);
}

inline std::string stability_csv(const StabilityReport& r) {
  std::ostringstream out;
  out << "sequence_id,frame,dist_x,F_stab\n";
  for (const auto& s : r.sequences) {
    for (std::size_t i = 0; i < s.dist_x.size(); ++i) {
      out << s.sequence_id << "," << i << "," << nlohmann::json(s.dist_x[i]).dump() << ","
          << detail::number_or_null(s.f_stab).dump() << "\n";
    }
  }
  return out.str();
}

}  // namespace curvelane
