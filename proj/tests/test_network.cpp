#include "curvelane/loss.hpp"
#include "curvelane/network.hpp"

#include "gradcheck.hpp"
#include "tiny_model.hpp"

#include <gtest/gtest.h>

using namespace curvelane;
using T = ag::Tensor<double>;

TEST(ModelConfig, PyramidExtentsForDefaultImage) {
  ModelConfig c;
  c.validate();
  EXPECT_EQ(c.level_stride(0), 8);
  const int expect[4][2] = {{45, 60}, {23, 30}, {12, 15}, {6, 8}};
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(c.level_extent(l).height, expect[l][0]);
    EXPECT_EQ(c.level_extent(l).width, expect[l][1]);
  }
}

TEST(ModelConfig, RejectsIndivisibleImage) {
  ModelConfig c;
  c.image = {361, 480};
  EXPECT_THROW(c.validate(), ModelError);
  c.image = {360, 480};
  c.levels = 7;
  EXPECT_THROW(c.validate(), ModelError);
}

TEST(Model, BackboneShapesMatchExtents) {
  ModelConfig c = testutil::tiny_model_config();
  c.image = {64, 48};
  c.stage_channels = {4, 6, 8};
  c.levels = 2;
  Model<double> m(c, 1);
  const auto f = m.encode(testutil::noise_image(64, 48, 2));
  ASSERT_EQ(f.levels.size(), 2u);
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(f.levels[l].dim(0), c.dim);
    EXPECT_EQ(f.levels[l].dim(1), c.level_extent(l).height);
    EXPECT_EQ(f.levels[l].dim(2), c.level_extent(l).width);
  }
  EXPECT_EQ(f.seg_logits.dim(1), c.level_extent(0).height);
  EXPECT_THROW(m.encode(testutil::noise_image(32, 48, 2)), ModelError);
}

TEST(Model, OutputShapes) {
  ModelConfig c = testutil::tiny_model_config();
  c.layers = 3;
  Model<double> m(c, 3);
  const auto out = m.forward(testutil::noise_image(32, 32, 1), testutil::tiny_rig());
  ASSERT_EQ(out.layers.size(), 3u);
  EXPECT_EQ(out.head.logits.dim(0), 2);
  EXPECT_EQ(out.head.sampled_x.dim(1), 4);
  EXPECT_EQ(out.head.coeff_x.dim(1), 4);
  for (const auto& l : out.layers) EXPECT_EQ(l.attention.size(), static_cast<std::size_t>(2 * 2 * 1 * 4 * 2));
}

TEST(Model, SameSeedSameParameters) {
  const auto c = testutil::tiny_model_config();
  Model<double> a(c, 5), b(c, 5), d(c, 6);
  EXPECT_EQ(a.params().flatten(), b.params().flatten());
  EXPECT_NE(a.params().flatten(), d.params().flatten());
}

TEST(RangeMask, WindowAndFallback) {
  const auto ys = uniform_y_positions(5, {3, 103});  // 3, 28, 53, 78, 103
  const auto m = range_mask({0.0, 0.3, 0.52}, {1.0, 0.6, 0.54}, ys, {3, 103});
  const std::vector<std::uint8_t> expect{1, 1, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0};
  EXPECT_EQ(m, expect);
}

TEST(ContextFeature, OneValidPointGivesItsFeature) {
  const T map = T::constant({2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  const T uv = T::constant({3, 2}, {0, 0, 1, 1, 0.5, 0.5});
  const T fc = context_feature<double>({map}, uv, {0, 1, 0}, 3);
  EXPECT_NEAR(fc[0], 4, 1e-12);
  EXPECT_NEAR(fc[1], 40, 1e-12);
  const T none = context_feature<double>({map}, uv, {0, 0, 0}, 3);
  EXPECT_EQ(none[0], 0.0);
  EXPECT_EQ(none[1], 0.0);
  // two levels, two valid points: plain mean of four samples
  const T two = context_feature<double>({map, map}, uv, {1, 1, 0}, 3);
  EXPECT_NEAR(two[0], 2.5, 1e-12);
}

TEST(CrossAttention, WeightsNormalizedPerHeadAndZeroOutsideRange) {
  ModelConfig c = testutil::tiny_model_config();
  c.anchors = 8;
  c.init_range_start = 0.3;
  c.init_range_end = 0.7;
  Model<double> m(c, 7);
  // random attention logits so the softmax is not uniform
  for (auto& e : m.params().entries()) {
    if (e.name.find("attn_weights.weight") == std::string::npos) continue;
    auto& w = e.value.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 * std::sin(7.0 * i);
  }
  const auto out = m.forward(testutil::noise_image(32, 32, 3), testutil::tiny_rig());
  const auto& tr = out.layers[0];
  const int lnk = c.levels * c.anchors * c.samples;
  const auto st = m.initial_state();
  const auto mask = range_mask(as_doubles(st.start), as_doubles(st.end), m.y_positions(), c.box.y);
  EXPECT_EQ(tr.sample_mask, mask);
  for (int q = 0; q < c.queries; ++q)
    for (int h = 0; h < c.heads; ++h) {
      double s = 0;
      for (int i = 0; i < lnk; ++i) {
        const double a = tr.attention[(q * c.heads + h) * lnk + i];
        const int n = (i / c.samples) % c.anchors;
        if (!mask[q * c.anchors + n]) {
          EXPECT_EQ(a, 0.0);
        }
        s += a;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(CrossAttention, DisabledRestrictionSamplesEveryPoint) {
  ModelConfig c = testutil::tiny_model_config();
  c.init_range_start = 0.3;
  c.init_range_end = 0.4;
  c.range_restriction = false;
  Model<double> m(c, 7);
  const auto out = m.forward(testutil::noise_image(32, 32, 3), testutil::tiny_rig());
  for (auto v : out.layers[0].sample_mask) EXPECT_EQ(v, 1);
  for (double a : out.layers[0].attention) EXPECT_GT(a, 0.0);
}

TEST(Refine, ZeroDeltasKeepState) {
  const auto c = testutil::tiny_model_config();
  Model<double> m(c, 2);
  const auto s = m.initial_state();
  const auto r = m.refine(s, T::zeros({c.queries, 2 * c.anchors + 2}));
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    EXPECT_NEAR(r.x[i], s.x[i], 1e-9);
    EXPECT_NEAR(r.z[i], s.z[i], 1e-9);
  }
  for (int q = 0; q < c.queries; ++q) {
    EXPECT_NEAR(r.start[q], s.start[q], 1e-9);
    EXPECT_NEAR(r.end[q], s.end[q], 1e-9);
  }
}

TEST(Refine, RangeStaysOrdered) {
  const auto c = testutil::tiny_model_config();
  Model<double> m(c, 2);
  std::vector<double> d(c.queries * (2 * c.anchors + 2));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 5.0 * std::sin(3.0 * i);
  const auto r = m.refine(m.initial_state(), T::constant({c.queries, 2 * c.anchors + 2}, d));
  for (int q = 0; q < c.queries; ++q) {
    EXPECT_GE(r.start[q], 0.0);
    EXPECT_LT(r.start[q], r.end[q]);
    EXPECT_LE(r.end[q], 1.0);
  }
  for (std::size_t i = 0; i < r.x.size(); ++i) {
    EXPECT_TRUE(c.box.x.contains(r.x[i]));
    EXPECT_TRUE(c.box.z.contains(r.z[i]));
  }
}

TEST(Refine, ZeroInitHeadLeavesAnchors) {
  ModelConfig c = testutil::tiny_model_config();
  c.zero_init_refine = true;
  c.layers = 2;
  Model<double> m(c, 2);
  const auto out = m.forward(testutil::noise_image(32, 32, 3), testutil::tiny_rig());
  const auto s = m.initial_state();
  for (std::size_t i = 0; i < s.x.size(); ++i) EXPECT_NEAR(out.layers[1].state.x[i], s.x[i], 1e-9);
}

TEST(Head, BoundariesFromRange) {
  const T s = T::constant({2, 1}, {0.1, 0.5});
  const T e = T::constant({2, 1}, {0.6, 0.9});
  const auto [ys, ye] = range_to_boundary(s, e, {3, 103}, 50.0);
  EXPECT_NEAR(ys[0], 13, 1e-12);
  const auto oracle = [](double s, double e) { return 3 + 100 * s + 100 * std::log1p(std::exp(50 * (e - s))) / 50; };
  EXPECT_NEAR(ye[0], oracle(0.1, 0.6), 1e-9);
  EXPECT_NEAR(ys[1], 53, 1e-12);
  EXPECT_NEAR(ye[1], oracle(0.5, 0.9), 1e-9);
  const auto [ys2, ye2] = range_to_boundary(T::constant({1, 1}, {0.9}), T::constant({1, 1}, {1.5}), {3, 103}, 50.0);
  EXPECT_NEAR(ye2[0], 103, 1e-12);
}

TEST(Head, PolyLanesAgreeWithSampledPoints) {
  for (auto mode : {CoeffMode::direct, CoeffMode::anchor_fit, CoeffMode::anchor_offset}) {
    ModelConfig c = testutil::tiny_model_config();
    c.anchors = 10;
    c.coeff_mode = mode;
    Model<double> m(c, 4);
    const auto out = m.forward(testutil::noise_image(32, 32, 5), testutil::tiny_rig());
    const auto lanes = to_poly_lanes(out.head, c.box.y);
    ASSERT_EQ(lanes.size(), 2u);
    for (int q = 0; q < 2; ++q) {
      const auto pts = sample_lane_points(lanes[q], m.y_positions());
      for (int n = 0; n < c.anchors; ++n) {
        EXPECT_NEAR(pts[n].x(), out.head.sampled_x[q * c.anchors + n], 1e-7) << to_string(mode);
        EXPECT_NEAR(pts[n].z(), out.head.sampled_z[q * c.anchors + n], 1e-7) << to_string(mode);
      }
    }
  }
}

TEST(Head, AnchorFitReproducesPolynomialAnchors) {
  ModelConfig c = testutil::tiny_model_config();
  c.anchors = 12;
  c.coeff_mode = CoeffMode::anchor_fit;
  c.init_range_start = 0.0;
  c.init_range_end = 1.0;
  Model<double> m(c, 4);
  QueryState<double> s = m.initial_state();
  std::vector<double> xv, zv;
  for (int q = 0; q < c.queries; ++q)
    for (double y : m.y_positions()) {
      xv.push_back(1.0 + 0.02 * y - 1e-4 * y * y + q);
      zv.push_back(0.01 * y);
    }
  s.x = T::constant({c.queries, c.anchors}, xv);
  s.z = T::constant({c.queries, c.anchors}, zv);
  const auto h = m.head(s, m.sampling_mask(s));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    EXPECT_NEAR(h.sampled_x[i], xv[i], 1e-8);
    EXPECT_NEAR(h.sampled_z[i], zv[i], 1e-8);
  }
}

TEST(Model, FloatMatchesDouble) {
  const auto c = testutil::tiny_model_config();
  Model<double> md(c, 8);
  Model<float> mf(c, 8);
  const auto img = testutil::noise_image(32, 32, 6);
  const auto od = md.forward(img, testutil::tiny_rig());
  const auto of = mf.forward(img, testutil::tiny_rig());
  for (std::size_t i = 0; i < od.head.sampled_x.size(); ++i)
    EXPECT_NEAR(od.head.sampled_x[i], of.head.sampled_x[i], 1e-3);
}

// Full objective of the tiny model, all parameters, frozen matching.
TEST(Gradients, TinyModelTotalLoss) {
  for (bool self_attention : {true, false}) {
    ModelConfig c = testutil::tiny_model_config();
    c.self_attention = self_attention;
    c.init_range_start = 0.05;
    c.init_range_end = 0.8;
    Model<double> m(c, 11);
    const auto img = testutil::noise_image(32, 32, 9);
    const auto rig = testutil::tiny_rig();
    const auto lanes = testutil::two_straight_lanes(3, 60);
    const auto targets = make_targets(lanes, m.y_positions(), c.box.y);
    Mask seg(16, 16);
    for (int r = 8; r < 16; ++r) seg.at(r, 7) = seg.at(r, 9) = 1;
    LossConfig lc;
    MatchResult match;
    frame_loss(m.forward(img, rig), targets, seg, c, lc, nullptr, &match);
    auto params = m.params().tensors();
    const auto rep = testutil::check_gradients(
        params, [&] { return frame_loss(m.forward(img, rig), targets, seg, c, lc, &match).total; });
    EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
    EXPECT_GT(rep.checked, 500);
  }
}
