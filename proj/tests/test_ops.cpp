#include "curvelane/nn.hpp"
#include "curvelane/ops.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace curvelane;
using T = ag::Tensor<double>;

namespace {

T random_param(ag::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = nd(rng);
  return T::parameter(std::move(shape), std::move(v));
}

std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  return w;
}

void expect_grads(std::vector<T> params, const std::function<T()>& f) {
  const auto rep = testutil::check_gradients(params, f);
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
  EXPECT_GT(rep.checked, 0);
}

}  // namespace

TEST(Conv2d, MatchesDirectLoops) {
  std::mt19937_64 rng(1);
  const int c = 2, h = 5, w = 7, co = 3, k = 3, stride = 2, pad = 1;
  T x = random_param({c, h, w}, rng), wt = random_param({co, c * k * k}, rng), b = random_param({co}, rng);
  const T y = ag::conv2d(x, wt, b, k, stride, pad);
  ASSERT_EQ(y.dim(1), 3);
  ASSERT_EQ(y.dim(2), 4);
  for (int o = 0; o < co; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        double s = b[o];
        for (int ci = 0; ci < c; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += wt[o * c * k * k + (ci * k + ky) * k + kx] * x[(ci * h + iy) * w + ix];
            }
        EXPECT_NEAR(y[(o * 3 + oy) * 4 + ox], s, 1e-12);
      }
}

TEST(Conv2d, Gradients) {
  std::mt19937_64 rng(2);
  T x = random_param({2, 6, 5}, rng), wt = random_param({3, 18}, rng), b = random_param({3}, rng);
  const auto wts = random_weights(3 * 3 * 3, rng);
  expect_grads({x, wt, b}, [&] { return ag::weighted_sum(ag::conv2d(x, wt, b, 3, 2, 1), wts); });
  T w1 = random_param({4, 2}, rng);
  const auto wts1 = random_weights(4 * 30, rng);
  expect_grads({x, w1}, [&] { return ag::weighted_sum(ag::conv2d(x, w1, T(), 1, 1, 0), wts1); });
}

TEST(Sinusoidal, FormulaAndGradients) {
  std::mt19937_64 rng(3);
  T x = random_param({2, 3}, rng, 0.5);
  const T e = ag::sinusoidal(x, 4, 100.0, 2.0);
  ASSERT_EQ(e.dim(1), 12);
  for (int i = 0; i < 6; ++i) {
    for (int k = 0; k < 2; ++k) {
      const double f = 2.0 * std::pow(100.0, -2.0 * k / 4.0);
      EXPECT_NEAR(e[i * 4 + 2 * k], std::sin(f * x[i]), 1e-12);
      EXPECT_NEAR(e[i * 4 + 2 * k + 1], std::cos(f * x[i]), 1e-12);
    }
  }
  const auto wts = random_weights(24, rng);
  expect_grads({x}, [&] { return ag::weighted_sum(ag::sinusoidal(x, 4, 100.0, 2.0), wts); });
}

TEST(ProjectNormalized, MatchesPinholeProjection) {
  const CameraRig rig = CameraRig::looking_forward({360, 480}, 260, 1.6, 0.03);
  const std::vector<double> ys{5, 20, 60};
  const T xs = T::constant({2, 3}, {-2, 0.5, 3, 1, -4, 10});
  const T zs = T::constant({2, 3}, {0, 0.2, -0.5, 1, 0, 2});
  const T uv = ag::project_normalized(xs, ys, zs, rig);
  for (int i = 0; i < 6; ++i) {
    const Vec3 p(xs[i], ys[i % 3], zs[i]);
    const auto pr = project_to_image(std::span<const Vec3>(&p, 1), rig);
    EXPECT_NEAR(uv[2 * i], pr.points2d[0].x() / 479.0, 1e-12);
    EXPECT_NEAR(uv[2 * i + 1], pr.points2d[0].y() / 359.0, 1e-12);
  }
}

TEST(ProjectNormalized, BehindCameraIsOutside) {
  const CameraRig rig = CameraRig::looking_forward({360, 480}, 260, 1.6, 0.03);
  const T uv = ag::project_normalized(T::constant({1, 1}, {0}), {-5}, T::constant({1, 1}, {0}), rig);
  EXPECT_EQ(uv[0], -1);
  EXPECT_EQ(uv[1], -1);
}

TEST(ProjectNormalized, Gradients) {
  std::mt19937_64 rng(4);
  const CameraRig rig = CameraRig::looking_forward({360, 480}, 260, 1.6, 0.03);
  T xs = random_param({2, 4}, rng, 3), zs = random_param({2, 4}, rng, 0.5);
  const std::vector<double> ys{5, 12, 40, 90};
  const auto wts = random_weights(16, rng);
  expect_grads({xs, zs}, [&] { return ag::weighted_sum(ag::project_normalized(xs, ys, zs, rig), wts); });
}

TEST(BilinearGather, PixelCentersMidpointsAndOutside) {
  // 1 channel, 2x3 map
  const T map = T::constant({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  const T coords = T::constant({5, 2}, {0, 0, 1, 1, 0.5, 0, 0.25, 0.5, 1.2, 0.5});
  const T g = ag::bilinear_gather(map, coords);
  EXPECT_NEAR(g[0], 1, 1e-12);
  EXPECT_NEAR(g[1], 6, 1e-12);
  EXPECT_NEAR(g[2], 2, 1e-12);
  EXPECT_NEAR(g[3], 0.25 * (1 + 2 + 4 + 5), 1e-12);
  EXPECT_EQ(g[4], 0.0);
}

TEST(BilinearGather, Gradients) {
  std::mt19937_64 rng(5);
  T map = random_param({3, 4, 5}, rng);
  T coords = T::parameter({4, 2}, {0.13, 0.41, 0.77, 0.29, 0.52, 0.93, 0.05, 0.61});
  const auto wts = random_weights(12, rng);
  expect_grads({map, coords}, [&] { return ag::weighted_sum(ag::bilinear_gather(map, coords), wts); });
}

TEST(DeformableSample, OneHotAttentionReadsBilinearValue) {
  std::mt19937_64 rng(6);
  // D = 4 channels, 2 heads, 1 level, 2 points, 1 sample
  T value = random_param({4, 5, 6}, rng);
  const T base = T::constant({2, 2}, {0.2, 0.4, 0.6, 0.8});
  // head 0 reads point 1 shifted by (+1, 0) level px; head 1 reads point 0 unshifted
  T off = T::constant({1, 8}, {0, 0, 1, 0, 0, 0, 0, 0});
  const T attn = T::constant({2, 2}, {0, 1, 1, 0});
  const T out = ag::deformable_sample<double>({value}, base, off, attn, {1, 2, 1, 2, 1});
  const T p1 = ag::bilinear_gather(value, T::constant({1, 2}, {0.6 + 1.0 / 5.0, 0.8}));
  const T p0 = ag::bilinear_gather(value, T::constant({1, 2}, {0.2, 0.4}));
  EXPECT_NEAR(out[0], p1[0], 1e-12);
  EXPECT_NEAR(out[1], p1[1], 1e-12);
  EXPECT_NEAR(out[2], p0[2], 1e-12);
  EXPECT_NEAR(out[3], p0[3], 1e-12);
}

TEST(DeformableSample, Gradients) {
  std::mt19937_64 rng(7);
  const int q = 2, m = 2, l = 2, n = 2, k = 2, d = 4;
  T v0 = random_param({d, 5, 6}, rng), v1 = random_param({d, 3, 3}, rng);
  T base = T::parameter({q * n, 2}, {0.2, 0.3, 0.55, 0.45, 0.7, 0.15, 0.35, 0.65});
  T off = random_param({q, m * l * n * k * 2}, rng, 0.3);
  T logits = random_param({q * m, l * n * k}, rng);
  const auto wts = random_weights(q * d, rng);
  expect_grads({v0, v1, base, off, logits}, [&] {
    const T a = ag::masked_softmax_rows(logits, {});
    return ag::weighted_sum(ag::deformable_sample<double>({v0, v1}, base, off, a, {q, m, l, n, k}), wts);
  });
}

TEST(ParamStore, DeterministicAndAssignable) {
  nn::ParamStore<double> a(9), b(9);
  nn::Linear<double> la(a, "fc", 3, 2), lb(b, "fc", 3, 2);
  EXPECT_EQ(a.flatten(), b.flatten());
  EXPECT_EQ(a.scalar_count(), 8u);
  std::vector<double> flat(8, 0.5);
  a.assign(flat);
  EXPECT_EQ(a.flatten(), flat);
  EXPECT_THROW(a.assign({1.0}), std::invalid_argument);
  EXPECT_THROW(a.constant("fc.weight", {1}, 0), std::invalid_argument);
}

TEST(ParamStore, FloatAndDoubleStartAlike) {
  nn::ParamStore<double> d(4);
  nn::ParamStore<float> f(4);
  nn::Conv2d<double>(d, "c", 2, 3, 3, 1, 1);
  nn::Conv2d<float>(f, "c", 2, 3, 3, 1, 1);
  const auto dv = d.flatten(), fv = f.flatten();
  ASSERT_EQ(dv.size(), fv.size());
  for (std::size_t i = 0; i < dv.size(); ++i) EXPECT_NEAR(dv[i], fv[i], 1e-6);
}
