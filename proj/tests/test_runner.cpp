#include "curvelane/plot.hpp"
#include "curvelane/runner.hpp"

#include <gtest/gtest.h>

#include <regex>

using namespace curvelane;

namespace {

DataConfig small_data(int sequences, int frames) {
  DataConfig d;
  d.sequences = sequences;
  d.frames = frames;
  d.scene.image = {64, 64};
  d.scene.camera.focal = 40;
  return d;
}

PolyLane straight(double x0, double confidence, double y0 = 3, double y1 = 103) {
  PolyLane l;
  l.confidence = confidence;
  l.y_start = y0;
  l.y_end = y1;
  l.coeffs_x = {x0, 0, 0, 0};
  l.coeffs_z = {0, 0, 0, 0};
  return l;
}

int count(const std::string& text, const std::string& what) {
  int n = 0;
  for (std::size_t p = text.find(what); p != std::string::npos; p = text.find(what, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Runner, GeneratedSequencesHaveRequestedShape) {
  const auto seqs = load_or_generate(small_data(3, 4));
  ASSERT_EQ(seqs.size(), 3u);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    EXPECT_EQ(seqs[s].frames.size(), 4u);
    EXPECT_EQ(seqs[s].sequence_id, sequence_name(static_cast<int>(s)));
  }
}

TEST(Runner, PreparedSegTargetMatchesFirstLevel) {
  ModelConfig mc;
  mc.image = {64, 64};
  mc.stage_channels = {8, 8, 16, 16};
  mc.levels = 2;
  const auto seqs = load_or_generate(small_data(1, 1));
  const auto t = prepare_frame(seqs[0].frames[0], mc);
  const auto e = mc.level_extent(0);
  EXPECT_EQ(t.seg_target.height, e.height);
  EXPECT_EQ(t.seg_target.width, e.width);
  EXPECT_EQ(t.targets.size(), seqs[0].frames[0].lanes.size());
  // a downsampled cell is on when any pixel under it is on
  int on = 0;
  for (auto v : t.seg_target.data) on += v;
  EXPECT_GT(on, 0);
}

TEST(Runner, ConfidenceThresholdFiltersPredictions) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  const auto kept = pred_eval_lanes({straight(0, 0.9), straight(3, 0.2), straight(-3, 0.5)}, ys, 0.5);
  EXPECT_EQ(kept.size(), 2u);
  // a lane whose range misses the grid is dropped
  EXPECT_TRUE(pred_eval_lanes({straight(0, 0.9, 200, 300)}, ys, 0.5).empty());
}

TEST(Runner, OracleReportIsPerfectAndStable) {
  EvalConfig cfg;
  const auto seqs = load_or_generate(small_data(2, 3));
  const auto r = evaluate_oracle(seqs, cfg);
  EXPECT_DOUBLE_EQ(r.openlane.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.once.f1, 1.0);
  EXPECT_NEAR(r.openlane.x_err_near, 0.0, 1e-12);
  ASSERT_EQ(r.stability.sequences.size(), 2u);
  EXPECT_EQ(r.stability.mean_f_stab, 0.0);
}

TEST(Runner, SingleFrameSequencesNoted) {
  EvalConfig cfg;
  const auto r = evaluate_oracle(load_or_generate(small_data(2, 1)), cfg);
  EXPECT_TRUE(r.stability.sequences.empty());
  EXPECT_EQ(r.notes.size(), 2u);
  EXPECT_TRUE(std::isnan(r.stability.mean_f_stab));
  EXPECT_TRUE(to_json(r, nlohmann::json::object())["stability"]["mean_F_stab"].is_null());
}

TEST(Runner, EvaluateLanesCountsAcrossSequences) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  const auto gt = pred_eval_lanes({straight(0, 1), straight(3.6, 1)}, ys, 0.5);
  const auto hit = pred_eval_lanes({straight(0.2, 1)}, ys, 0.5);
  const std::vector<FrameLanes> preds{{hit, hit}, {hit}}, gts{{gt, gt}, {gt}};
  const auto r = evaluate_lanes(preds, gts, {"a", "b"}, cfg);
  EXPECT_EQ(r.openlane.true_positives, 3);
  EXPECT_EQ(r.openlane.num_gt, 6);
  EXPECT_EQ(r.openlane.num_pred, 3);
  EXPECT_NEAR(r.openlane.f1, 2 * 1.0 * 0.5 / 1.5, 1e-12);
  EXPECT_EQ(r.stability.sequences.size(), 1u);
  EXPECT_NEAR(r.stability.sequences[0].f_stab, 0.0, 1e-12);
  EXPECT_THROW(evaluate_lanes(preds, {gts[0]}, {"a"}, cfg), EvalError);
}

TEST(Runner, PredictionsCoverEveryFrame) {
  ModelConfig mc;
  mc.image = {64, 64};
  mc.stage_channels = {8, 8, 16, 16};
  mc.levels = 2;
  mc.dim = 16;
  mc.heads = 2;
  mc.layers = 1;
  mc.queries = 4;
  mc.anchors = 8;
  mc.ffn_dim = 16;
  Model<float> m(mc, 3);
  const auto seqs = load_or_generate(small_data(2, 3));
  for (auto v : {FusionVariant::none, FusionVariant::topk_query_anchors}) {
    FusionConfig fc;
    fc.variant = v;
    fc.top_k = 2;
    const auto p = predict_sequences(m, fc, seqs);
    ASSERT_EQ(p.size(), 2u);
    for (const auto& s : p) {
      ASSERT_EQ(s.size(), 3u);
      // propagated queries add predictions after the first frame
      EXPECT_EQ(s[0].size(), 4u);
      EXPECT_EQ(s[2].size(), v == FusionVariant::none ? 4u : 6u);
    }
  }
}

TEST(Runner, CsvTables) {
  EvalConfig cfg;
  const auto r = evaluate_oracle(load_or_generate(small_data(1, 3)), cfg);
  const auto csv = metric_report_csv(r);
  EXPECT_EQ(csv.rfind("metric,value\n", 0), 0u);
  EXPECT_NE(csv.find("openlane.F1,1.0\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("stability.mean_F_stab,0.0\n"), std::string::npos) << csv;
  const auto st = stability_csv(r.stability);
  EXPECT_EQ(st.rfind("sequence_id,frame,dist_x,F_stab\n", 0), 0u);
  EXPECT_EQ(count(st, "\n"), 4);
}

TEST(Plot, SeriesBecomePolylinesInsideTheFrame) {
  SvgChart c("a <title> & more", "x", "y", 400, 300);
  c.set_limits(0, 10, 0, 10);
  Series s;
  s.x = {0, 10};
  s.y = {0, 10};
  s.markers = true;
  c.add(s);
  Series d;
  d.x = {5};
  d.y = {5};
  d.dashed = true;
  c.add(d);
  c.add(Series{});
  const auto svg = c.render();
  EXPECT_EQ(count(svg, "<polyline"), 2);
  EXPECT_EQ(count(svg, "<circle"), 2);
  EXPECT_EQ(count(svg, "stroke-dasharray"), 1);
  EXPECT_NE(svg.find("a &lt;title&gt; &amp; more"), std::string::npos);
  // plot area is [60, 380] x [40, 250]; the diagonal runs corner to corner
  EXPECT_NE(svg.find("points=\"60.00,250.00 380.00,40.00 \""), std::string::npos) << svg;
}

TEST(Plot, FittedLimitsPadTheData) {
  SvgChart c("t", "x", "y", 400, 300);
  Series s;
  s.x = {0, 1};
  s.y = {2, 2};
  c.add(s);
  const auto svg = c.render();
  std::smatch m;
  ASSERT_TRUE(std::regex_search(svg, m, std::regex("points=\"([0-9.]+),([0-9.]+) ([0-9.]+),([0-9.]+) \"")));
  EXPECT_GT(std::stod(m[1]), 60.0);
  EXPECT_LT(std::stod(m[3]), 380.0);
  EXPECT_EQ(m[2], m[4]);
}
