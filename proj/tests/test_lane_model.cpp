#include "curvelane/lane_model.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace curvelane;

namespace {

double horner_oracle(const std::vector<double>& c, double y) {
  // c0 + y*(c1 + y*(c2 + y*c3)) written out for a cubic
  return c[0] + y * (c[1] + y * (c[2] + y * c[3]));
}

PolyLane make_lane(std::vector<double> cx, std::vector<double> cz) {
  PolyLane l;
  l.y_start = 3;
  l.y_end = 103;
  l.coeffs_x = std::move(cx);
  l.coeffs_z = std::move(cz);
  return l;
}

}  // namespace

TEST(SampleLanePoints, ConstantPolynomial) {
  const std::vector<double> ys{10};
  const auto p = sample_lane_points(make_lane({1.5, 0, 0, 0}, {0, 0, 0, 0}), ys);
  EXPECT_EQ(p[0], Vec3(1.5, 10, 0));
}

TEST(SampleLanePoints, IdentityLine) {
  const std::vector<double> ys{7};
  const auto p = sample_lane_points(make_lane({0, 1, 0, 0}, {0, 0, 0, 0}), ys);
  EXPECT_EQ(p[0], Vec3(7, 7, 0));
}

TEST(SampleLanePoints, CubicMatchesHornerOracle) {
  const std::vector<double> c{0.1, 0.02, -0.001, 0.0001};
  const std::vector<double> ys{20};
  const auto p = sample_lane_points(make_lane(c, c), ys);
  const double expect = 0.1 + 0.02 * 20 - 0.001 * 400 + 0.0001 * 8000;
  EXPECT_NEAR(p[0].x(), horner_oracle(c, 20), 1e-12);
  EXPECT_NEAR(p[0].x(), expect, 1e-12);
  EXPECT_NEAR(p[0].z(), expect, 1e-12);
}

TEST(SampleLanePoints, EvaluatesOutsideBoundaryToo) {
  PolyLane l = make_lane({1, 0, 0, 0}, {0, 0, 0, 0});
  l.y_start = 50;
  l.y_end = 60;
  const auto ys = uniform_y_positions(40);
  EXPECT_EQ(sample_lane_points(l, ys).size(), 40u);
}

TEST(PolyLane, ValidateRejectsBadBoundary) {
  PolyLane l = make_lane({0, 0, 0, 0}, {0, 0, 0, 0});
  l.y_start = 50;
  l.y_end = 40;
  EXPECT_THROW(l.validate(WorldBox{}.y), LaneModelError);
  l.y_end = 120;
  EXPECT_THROW(l.validate(WorldBox{}.y), LaneModelError);
  l.y_end = 60;
  EXPECT_NO_THROW(l.validate(WorldBox{}.y));
  l.coeffs_z.pop_back();
  EXPECT_THROW(l.validate(WorldBox{}.y), LaneModelError);
}

TEST(UniformY, DefaultGrid) {
  const auto ys = uniform_y_positions(40);
  ASSERT_EQ(ys.size(), 40u);
  EXPECT_DOUBLE_EQ(ys.front(), 3.0);
  EXPECT_DOUBLE_EQ(ys.back(), 103.0);
  for (std::size_t i = 1; i < ys.size(); ++i) EXPECT_GT(ys[i], ys[i - 1]);
}

TEST(FitPolynomials, ExactLineRecovery) {
  std::vector<Vec3> pts;
  for (double y : {3.0, 10.0, 20.0, 40.0, 80.0}) pts.emplace_back(2 + 0.5 * y, y, 0);
  const auto fit = fit_polynomials(pts, 3);
  const std::vector<double> expect{2, 0.5, 0, 0};
  for (int r = 0; r < 4; ++r) {
    EXPECT_NEAR(fit.coeffs_x[r], expect[r], 1e-9);
    EXPECT_NEAR(fit.coeffs_z[r], 0.0, 1e-9);
  }
}

TEST(FitPolynomials, InterpolatesFourPoints) {
  std::vector<Vec3> pts{{1, 3, 0.1}, {-2, 20, 0.5}, {0.5, 50, -0.3}, {4, 90, 1.0}};
  const auto fit = fit_polynomials(pts, 3);
  for (const auto& p : pts) {
    EXPECT_NEAR(horner(fit.coeffs_x, p.y()), p.x(), 1e-9);
    EXPECT_NEAR(horner(fit.coeffs_z, p.y()), p.z(), 1e-9);
  }
}

TEST(FitPolynomials, NoisyMatchesNormalEquations) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0, 0.2);
  std::vector<Vec3> pts;
  for (int i = 0; i < 30; ++i) {
    const double y = 3 + i * 3.3;
    pts.emplace_back(1 + 0.01 * y + nd(rng), y, 0.3 + nd(rng));
  }
  const auto fit = fit_polynomials(pts, 3);
  // normal equations in the raw y basis, solved with a long-double LU
  const int n = 4;
  long double ata[4][5] = {};
  for (const auto& p : pts) {
    long double pw[4] = {1, p.y(), p.y() * p.y(), p.y() * p.y() * p.y()};
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) ata[r][c] += pw[r] * pw[c];
      ata[r][4] += pw[r] * p.x();
    }
  }
  for (int k = 0; k < n; ++k) {
    int piv = k;
    for (int r = k + 1; r < n; ++r)
      if (std::fabs(static_cast<double>(ata[r][k])) > std::fabs(static_cast<double>(ata[piv][k]))) piv = r;
    for (int c = 0; c <= n; ++c) std::swap(ata[k][c], ata[piv][c]);
    for (int r = 0; r < n; ++r) {
      if (r == k) continue;
      const long double f = ata[r][k] / ata[k][k];
      for (int c = 0; c <= n; ++c) ata[r][c] -= f * ata[k][c];
    }
  }
  for (int r = 0; r < n; ++r) {
    const double oracle = static_cast<double>(ata[r][4] / ata[r][r]);
    EXPECT_NEAR(fit.coeffs_x[r], oracle, 1e-6 * std::max(1.0, std::abs(oracle)));
  }
}

TEST(FitPolynomials, DuplicateYIsRankDeficient) {
  std::vector<Vec3> pts{{0, 5, 0}, {1, 5, 0}, {2, 5, 0}, {3, 5, 0}, {4, 6, 0}};
  EXPECT_THROW(fit_polynomials(pts, 3), LaneModelError);
  EXPECT_THROW(fit_polynomials(std::vector<Vec3>{{0, 1, 0}}, 3), LaneModelError);
}

TEST(FitPolynomials, SampleFitRoundTrip) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1, 1);
  const auto ys = uniform_y_positions(40);
  for (int t = 0; t < 20; ++t) {
    const PolyLane l = make_lane({u(rng) * 5, u(rng) * 0.05, u(rng) * 1e-3, u(rng) * 1e-5},
                                 {u(rng), u(rng) * 0.01, u(rng) * 1e-4, u(rng) * 1e-6});
    const auto fit = fit_polynomials(sample_lane_points(l, ys), 3);
    for (int r = 0; r < 4; ++r) {
      EXPECT_NEAR(fit.coeffs_x[r], l.coeffs_x[r], 1e-8);
      EXPECT_NEAR(fit.coeffs_z[r], l.coeffs_z[r], 1e-8);
    }
  }
}

TEST(ClipToRange, FullRangeAllActive) {
  const auto ys = uniform_y_positions(40);
  std::vector<Vec3> pts;
  for (double y : ys) pts.emplace_back(0, y, 0);
  EXPECT_EQ(clip_points_to_range(pts, {0, 1}, WorldBox{}.y).active_count(), 40);
}

TEST(ClipToRange, EnumeratedCounts) {
  const auto ys = uniform_y_positions(40);
  std::vector<Vec3> pts;
  for (double y : ys) pts.emplace_back(0, y, 0);
  const Interval span = WorldBox{}.y;
  auto enumerate = [&](double s, double e) {
    int n = 0;
    for (double y : ys) n += (y >= 3 + s * 100 && y < 3 + e * 100);
    return n;
  };
  const auto half = clip_points_to_range(pts, {0, 0.5}, span);
  EXPECT_EQ(half.active_count(), 20);
  EXPECT_EQ(enumerate(0, 0.5), 20);
  for (int i = 0; i < 40; ++i) EXPECT_EQ(half.active[i], i < 20 ? 1 : 0);
  EXPECT_EQ(clip_points_to_range(pts, {0.25, 0.25 + 1.0 / 40}, span).active_count(), 1);
  EXPECT_EQ(enumerate(0.25, 0.25 + 1.0 / 40), 1);
}

TEST(ClipToRange, OrderPreservedAndMonotone) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 1);
  const auto ys = uniform_y_positions(40);
  std::vector<Vec3> pts;
  for (double y : ys) pts.emplace_back(u(rng), y, 0);
  for (int t = 0; t < 100; ++t) {
    const double s = u(rng) * 0.5;
    const double e1 = s + 0.01 + u(rng) * 0.2;
    const double e2 = std::min(1.0, e1 + u(rng) * 0.3);
    const auto a = clip_points_to_range(pts, {s, e1}, WorldBox{}.y);
    const auto b = clip_points_to_range(pts, {s, e2}, WorldBox{}.y);
    EXPECT_LE(a.active_count(), b.active_count());
    for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_EQ(a.points[i], pts[i]);
  }
}

TEST(AnchorPointSet, Validation) {
  AnchorPointSet a;
  for (double y : uniform_y_positions(4)) a.points.emplace_back(0, y, 0);
  a.range = {0.2, 0.8};
  EXPECT_NO_THROW(a.validate(4));
  EXPECT_THROW(a.validate(5), LaneModelError);
  a.range = {0.8, 0.8};
  EXPECT_THROW(a.validate(4), LaneModelError);
}

TEST(ResamplePolyline, LinearInterpolationAndVisibility) {
  std::vector<Vec3> pts{{0, 10, 0}, {2, 20, 1}, {2, 30, 3}};
  const std::vector<double> ys{5, 10, 15, 25, 30, 40};
  const auto r = resample_polyline(pts, ys);
  EXPECT_EQ(r.visible, (std::vector<std::uint8_t>{0, 1, 1, 1, 1, 0}));
  EXPECT_NEAR(r.x[2], 1.0, 1e-12);
  EXPECT_NEAR(r.z[2], 0.5, 1e-12);
  EXPECT_NEAR(r.z[3], 2.0, 1e-12);
  EXPECT_NEAR(r.x[0], 0.0, 1e-12);
  EXPECT_NEAR(r.z[5], 3.0, 1e-12);
}
