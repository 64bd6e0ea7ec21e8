#include "curvelane/evaluation.hpp"
#include "curvelane/synthetic.hpp"

#include "eval_oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace curvelane;
using testutil::Line;

namespace {

std::vector<EvalLane> evals(const std::vector<Line>& ls, const std::vector<double>& ys) {
  std::vector<EvalLane> out;
  for (const auto& l : ls) out.push_back(testutil::line_eval(l, ys));
  return out;
}

}  // namespace

TEST(OpenLaneEval, IdenticalPredictionIsPerfect) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  const std::vector<Line> ls{{-2, 0.01, 0.1, 5, 80}, {1.5, -0.005, 0.0, 3, 103}};
  const auto r = openlane_evaluate(evals(ls, ys), evals(ls, ys), cfg);
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.true_positives, 2);
  EXPECT_NEAR(r.x_err_near, 0, 1e-12);
  EXPECT_NEAR(r.x_err_far, 0, 1e-12);
  EXPECT_NEAR(r.z_err_near, 0, 1e-12);
  EXPECT_NEAR(r.z_err_far, 0, 1e-12);
  EXPECT_FALSE(r.empty_convention);
}

TEST(OpenLaneEval, LateralOffsetBeyondLimitIsUnmatched) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line p = g;
  p.a = 2.0;
  const auto r = openlane_evaluate(evals({p}, ys), evals({g}, ys), cfg);
  EXPECT_EQ(r.f1, 0.0);
  EXPECT_EQ(r.true_positives, 0);
}

TEST(OpenLaneEval, NearFarErrorsSplitAtBoundary) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line p = g;
  p.a = 0.4;
  p.c = -0.2;
  const auto r = openlane_evaluate(evals({p}, ys), evals({g}, ys), cfg);
  EXPECT_EQ(r.true_positives, 1);
  EXPECT_NEAR(r.x_err_near, 0.4, 1e-9);
  EXPECT_NEAR(r.x_err_far, 0.4, 1e-9);
  EXPECT_NEAR(r.z_err_near, 0.2, 1e-9);
  EXPECT_NEAR(r.z_err_far, 0.2, 1e-9);

  // only the far band differs
  Line bent{0, 0.02, 0, 3, 103};
  bent.a = -0.02 * 40;  // x = 0.02 (y - 40)
  const auto r2 = openlane_evaluate(evals({bent}, ys), evals({g}, ys), cfg);
  double near = 0, far = 0;
  int nn = 0, nf = 0;
  for (double y : ys) {
    const double e = std::abs(bent.x(y));
    if (y < 40) {
      near += e;
      ++nn;
    } else {
      far += e;
      ++nf;
    }
  }
  EXPECT_NEAR(r2.x_err_near, near / nn, 1e-9);
  EXPECT_NEAR(r2.x_err_far, far / nf, 1e-9);
}

TEST(OpenLaneEval, EmptyOnBothSidesUsesConvention) {
  EvalConfig cfg;
  const auto r = openlane_evaluate({}, {}, cfg);
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_TRUE(r.empty_convention);
  EXPECT_TRUE(to_json(r)["metadata"]["empty_f1_convention"].get<bool>());
}

TEST(OpenLaneEval, PartialCoverageCountsAgainstMatch) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line half = g;
  half.y1 = 53;  // covers about half of the gt
  EXPECT_EQ(openlane_evaluate(evals({half}, ys), evals({g}, ys), cfg).true_positives, 0);
  Line most = g;
  most.y1 = 90;
  EXPECT_EQ(openlane_evaluate(evals({most}, ys), evals({g}, ys), cfg).true_positives, 1);
}

TEST(OpenLaneEval, MatchesEnumerationOracleOnConstructedCases) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  std::mt19937_64 rng(11);
  int nontrivial = 0;
  for (int t = 0; t < 100; ++t) {
    const auto c = testutil::constructed_case(rng);
    std::vector<std::vector<bool>> cand(c.preds.size(), std::vector<bool>(c.gts.size()));
    for (std::size_t p = 0; p < c.preds.size(); ++p)
      for (std::size_t g = 0; g < c.gts.size(); ++g)
        cand[p][g] = testutil::line_candidate(c.preds[p], c.gts[g], ys, cfg.max_distance, cfg.coverage);
    const int tp = testutil::enumerate_max_matching(cand);
    nontrivial += tp > 0 && tp < 3;
    const double prec = tp / 4.0, rec = tp / 3.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    const auto r = openlane_evaluate(evals(c.preds, ys), evals(c.gts, ys), cfg);
    ASSERT_EQ(r.true_positives, tp) << "case " << t;
    EXPECT_DOUBLE_EQ(r.precision, prec);
    EXPECT_DOUBLE_EQ(r.recall, rec);
    EXPECT_DOUBLE_EQ(r.f1, f1);
  }
  EXPECT_GT(nontrivial, 20);
}

TEST(OpenLaneEval, MatchingPrefersLowerCostAmongCandidates) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line close = g, far = g;
  close.a = 0.1;
  far.a = 1.0;
  OpenLaneAccumulator acc(cfg);
  const auto pairs = acc.add(evals({far, close}, ys), evals({g}, ys));
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].first, 1);
}

TEST(OpenLaneEval, GroundTruthAgainstItselfOnGeneratedScenes) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  SceneConfig sc;
  for (int s = 0; s < 5; ++s) {
    const auto frames = generate_sequence(sc, 1, s);
    std::vector<EvalLane> e;
    for (const auto& g : frames[0].lanes) e.push_back(eval_lane(g, ys));
    const auto r = openlane_evaluate(e, e, cfg);
    EXPECT_EQ(r.f1, 1.0);
    EXPECT_EQ(r.x_err_near, 0.0);
    EXPECT_EQ(r.x_err_far, 0.0);
    EXPECT_EQ(r.category_accuracy, 1.0);
  }
}

TEST(OpenLaneEval, Monotonicity) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  std::mt19937_64 rng(3);
  for (int t = 0; t < 30; ++t) {
    const auto c = testutil::constructed_case(rng);
    auto preds = evals(c.preds, ys);
    const auto gts = evals(c.gts, ys);
    OpenLaneAccumulator acc(cfg);
    const auto pairs = acc.add(preds, gts);
    const auto base = acc.result();
    // perfect prediction for a gt left unmatched
    for (int g = 0; g < 3; ++g) {
      if (std::any_of(pairs.begin(), pairs.end(), [&](const auto& pr) { return pr.second == g; })) continue;
      auto with_good = preds;
      with_good.push_back(gts[g]);
      EXPECT_GE(openlane_evaluate(with_good, gts, cfg).f1, base.f1);
    }
    auto with_bad = preds;
    with_bad.push_back(testutil::line_eval(Line{25, 0, 0, 3, 103}, ys));
    EXPECT_LE(openlane_evaluate(with_bad, gts, cfg).precision, base.precision + 1e-15);
  }
}

TEST(OpenLaneEval, PooledOverFrames) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line off = g;
  off.a = 3;
  OpenLaneAccumulator acc(cfg);
  acc.add(evals({g}, ys), evals({g}, ys));
  acc.add(evals({off}, ys), evals({g}, ys));
  acc.add({}, evals({g}, ys));
  const auto r = acc.result();
  EXPECT_EQ(r.true_positives, 1);
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 1.0 / 3.0);
}

TEST(OpenLaneEval, CategoryAccuracyOnlyWithPredictedCategories) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  auto g = testutil::line_eval(Line{0, 0, 0, 3, 103}, ys);
  g.category = 2;
  auto p = g;
  p.category = -1;
  EXPECT_TRUE(std::isnan(openlane_evaluate({p}, {g}, cfg).category_accuracy));
  EXPECT_TRUE(to_json(openlane_evaluate({p}, {g}, cfg))["category_accuracy"].is_null());
  p.category = 1;
  EXPECT_EQ(openlane_evaluate({p}, {g}, cfg).category_accuracy, 0.0);
}

TEST(OpenLaneEval, PolyLaneSampledInsideItsRange) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  PolyLane p;
  p.y_start = 10;
  p.y_end = 50;
  p.coeffs_x = {1.0, 0.01};
  p.coeffs_z = {0.2, 0.0};
  const auto e = eval_lane(p, ys);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    EXPECT_EQ(e.visible[i], ys[i] >= 10 && ys[i] <= 50);
    EXPECT_NEAR(e.x[i], 1.0 + 0.01 * ys[i], 1e-12);
  }
  EXPECT_EQ(e.points.size(), static_cast<std::size_t>(std::count(e.visible.begin(), e.visible.end(), 1)));
}

TEST(OnceEval, IdenticalLanesAccepted) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  const std::vector<Line> ls{{-2, 0.01, 0.1, 5, 80}};
  const auto r = once_evaluate(evals(ls, ys), evals(ls, ys), cfg);
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.mean_cd_error, 0.0);
}

TEST(OnceEval, DisjointLanesRejected) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  const auto a = testutil::line_lane(Line{0, 0, 0, 3, 60});
  const auto b = testutil::line_lane(Line{10, 0, 0, 3, 60});
  EXPECT_EQ(topview_iou(a.points, b.points, cfg.once_lane_width, cfg.once_step), 0.0);
  const auto r = once_evaluate(evals({Line{10, 0, 0, 3, 60}}, ys), evals({Line{0, 0, 0, 3, 60}}, ys), cfg);
  EXPECT_EQ(r.true_positives, 0);
}

TEST(OnceEval, IouMatchesDenseRaster) {
  EvalConfig cfg;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 6; ++t) {
    // gently curved lanes partly overlapping
    std::vector<Vec3> a, b;
    const double a0 = u(rng), da = 0.4 + 0.6 * u(rng), k = 0.002 * (u(rng) - 0.5);
    const double y0 = 3 + 5 * u(rng), y1 = y0 + 15 + 10 * u(rng);
    const double z0 = y0 + 5 * u(rng), z1 = y1 + 5 * u(rng);
    for (double y = y0; y <= y1 + 1e-9; y += 0.5) a.emplace_back(a0 + 0.05 * y + k * y * y, y, 0);
    for (double y = z0; y <= z1 + 1e-9; y += 0.5) b.emplace_back(a0 + da + 0.05 * y + k * y * y, y, 0);
    const double fast = topview_iou(a, b, cfg.once_lane_width, cfg.once_step);
    const double raster = testutil::raster_iou(a, b, cfg.once_lane_width, 0.02);
    EXPECT_GT(raster, 0.05);
    EXPECT_NEAR(fast, raster, 0.02 * raster) << "case " << t;
  }
}

TEST(OnceEval, ChamferIsUnilateral) {
  std::vector<Vec3> pred{{0, 10, 0}, {0, 11, 0}};
  std::vector<Vec3> gt{{0.2, 10, 0}, {0.2, 11, 0}, {5, 50, 0}};
  EXPECT_NEAR(unilateral_chamfer(pred, gt), 0.2, 1e-12);
  EXPECT_GT(unilateral_chamfer(gt, pred), 0.2);
}

TEST(OnceEval, ChamferThresholdRejects) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 60};
  Line p = g;
  p.c = 0.5;  // same top view, off in height
  const auto r = once_evaluate(evals({p}, ys), evals({g}, ys), cfg);
  EXPECT_EQ(r.true_positives, 0);
  p.c = 0.1;
  const auto r2 = once_evaluate(evals({p}, ys), evals({g}, ys), cfg);
  EXPECT_EQ(r2.true_positives, 1);
  EXPECT_NEAR(r2.mean_cd_error, 0.1, 1e-9);
}

TEST(Stability, TwoPointSeries) {
  const auto s = stability_of_series("a", {0.1, 0.3});
  EXPECT_NEAR(s.f_stab, 0.1, 1e-15);
}

TEST(Stability, ConstantSeriesIsExactlyZero) {
  const auto s = stability_of_series("a", std::vector<double>(7, 0.37));
  EXPECT_EQ(s.f_stab, 0.0);
}

TEST(Stability, RandomSeriesMatchTextbookFormula) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 2);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(10);
    for (auto& x : v) x = u(rng);
    EXPECT_NEAR(population_std(v), testutil::textbook_population_std(v), 1e-12);
  }
}

TEST(Stability, FramesWithoutMatchesAreSkipped) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g{0, 0, 0, 3, 103};
  Line p = g;
  p.a = 0.2;
  std::vector<std::vector<EvalLane>> preds{evals({p}, ys), {}, evals({p}, ys)};
  std::vector<std::vector<EvalLane>> gts{evals({g}, ys), evals({g}, ys), evals({g}, ys)};
  const auto s = stability_evaluate("seq", preds, gts, cfg);
  ASSERT_EQ(s.dist_x.size(), 2u);
  EXPECT_EQ(s.skipped_frames, std::vector<int>{1});
  EXPECT_NEAR(s.dist_x[0], 0.2, 1e-9);
  EXPECT_NEAR(s.f_stab, 0.0, 1e-12);
}

TEST(Stability, ConstantBiasGivesZeroSpread) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  std::vector<std::vector<EvalLane>> preds, gts;
  for (int f = 0; f < 5; ++f) {
    std::vector<Line> g{{-1.8 + 0.1 * f, 0.01, 0, 3, 90}, {1.8 + 0.1 * f, 0.01, 0, 3, 90}};
    auto p = g;
    for (auto& l : p) l.a += 0.3;
    preds.push_back(evals(p, ys));
    gts.push_back(evals(g, ys));
  }
  const auto s = stability_evaluate("seq", preds, gts, cfg);
  for (double d : s.dist_x) EXPECT_NEAR(d, 0.3, 1e-9);
  EXPECT_NEAR(s.f_stab, 0.0, 1e-12);
}

TEST(Stability, DistXAveragesOverLanesAndPoints) {
  EvalConfig cfg;
  const auto ys = cfg.grid();
  Line g1{-2, 0, 0, 3, 103}, g2{2, 0, 0, 3, 103};
  Line p1 = g1, p2 = g2;
  p1.a += 0.1;
  p2.a -= 0.5;
  EXPECT_NEAR(frame_dist_x(evals({p1, p2}, ys), evals({g1, g2}, ys), cfg), 0.3, 1e-9);
}

TEST(Stability, RejectsShortSequences) {
  EvalConfig cfg;
  EXPECT_THROW(stability_evaluate("s", {{}}, {{}}, cfg), EvalError);
  EXPECT_THROW(stability_evaluate("s", {{}, {}}, {{}}, cfg), EvalError);
}

TEST(Stability, MeanOverSequences) {
  auto r = summarize_stability({stability_of_series("a", {0.1, 0.3}), stability_of_series("b", {1, 1})});
  EXPECT_NEAR(r.mean_f_stab, 0.05, 1e-15);
  const auto j = to_json(r);
  EXPECT_EQ(j["sequences"].size(), 2u);
  EXPECT_TRUE(j.contains("mean_F_stab"));
}

TEST(Reports, CsvFlattensScalars) {
  OpenLaneResult r;
  r.f1 = 0.5;
  const auto csv = metrics_csv(to_json(r));
  EXPECT_NE(csv.find("metric,value\n"), std::string::npos);
  EXPECT_NE(csv.find("F1,0.5\n"), std::string::npos);
  EXPECT_NE(csv.find("metadata.empty_f1_convention,false\n"), std::string::npos);
  EXPECT_NE(csv.find("category_accuracy,\n"), std::string::npos);
}

TEST(EvalConfigTest, Validation) {
  EvalConfig cfg;
  cfg.coverage = 0;
  EXPECT_THROW(cfg.validate(), EvalError);
  cfg = EvalConfig{};
  cfg.grid_points = 1;
  EXPECT_THROW(OpenLaneAccumulator{cfg}, EvalError);
}
