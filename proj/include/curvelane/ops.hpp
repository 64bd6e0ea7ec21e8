#pragma once

// Spatial differentiable ops: convolution, camera projection of anchor
// points, bilinear gathers and multi-level deformable sampling. Feature maps
// are C x H x W (channel-major).

#include "curvelane/autograd.hpp"
#include "curvelane/geometry.hpp"

#include <cmath>
#include <vector>

namespace curvelane::ag {

/// x: {C, H, W}; w: {Co, C*k*k}; b: {Co} (may be undefined). Zero padding.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int k, int stride, int pad) {
  detail::check_rank(x.shape(), 3, "conv2d");
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0);
  if (w.dim(1) != c * k * k) throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input too small");
  const int rows = c * k * k, cols = ho * wo;
  std::vector<S> col(static_cast<std::size_t>(rows) * cols, S(0));
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const S* src = x.data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < wd) dst[oy * wo + ox] = src[ix];
          }
        }
      }
  std::vector<S> out(static_cast<std::size_t>(co) * cols);
  detail::MapMat<S> om(out.data(), co, cols);
  om.noalias() = detail::CMapMat<S>(w.data(), co, rows) * detail::CMapMat<S>(col.data(), rows, cols);
  const bool has_bias = b.defined();
  if (has_bias) {
    for (int o = 0; o < co; ++o) om.row(o).array() += b[static_cast<std::size_t>(o)];
  }
  std::vector<Tensor<S>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_result<S>(
      {co, ho, wo}, std::move(out), std::move(inputs),
      [c, h, wd, k, stride, pad, ho, wo, rows, cols, co, has_bias, col = std::move(col)](Node<S>& self) {
        detail::CMapMat<S> go(self.grad.data(), co, cols);
        if (S* g = detail::grad_of(self, 1)) {
          detail::MapMat<S>(g, co, rows).noalias() += go * detail::CMapMat<S>(col.data(), rows, cols).transpose();
        }
        if (has_bias) {
          if (S* g = detail::grad_of(self, 2)) {
            for (int o = 0; o < co; ++o) g[o] += go.row(o).sum();
          }
        }
        if (S* g = detail::grad_of(self, 0)) {
          detail::RowMat<S> dcol = detail::CMapMat<S>(self.parents[1]->value.data(), co, rows).transpose() * go;
          for (int ci = 0; ci < c; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const S* src = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  S* dst = g + (static_cast<std::size_t>(ci) * h + iy) * wd;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < wd) dst[ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

/// {C, H, W} map viewed as {C, H*W}.
template <class S>
Tensor<S> flatten_spatial(const Tensor<S>& x) {
  return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
}

/// Sinusoidal embedding of every entry of x {R, C}: out {R, C*dim}, with
/// entries (sin(scale*v*w_0), cos(scale*v*w_0), sin(scale*v*w_1), ...) and
/// w_k = base^(-2k/dim).
template <class S>
Tensor<S> sinusoidal(const Tensor<S>& x, int dim, S base, S scale) {
  detail::check_rank(x.shape(), 2, "sinusoidal");
  if (dim <= 0 || dim % 2) throw ShapeError("sinusoidal: dim must be positive and even");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<S> freq(dim / 2);
  for (int k = 0; k < dim / 2; ++k) freq[k] = scale * std::pow(base, -S(2 * k) / S(dim));
  std::vector<S> v(static_cast<std::size_t>(r) * c * dim);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (int k = 0; k < dim / 2; ++k) {
      v[i * dim + 2 * k] = std::sin(freq[k] * x[i]);
      v[i * dim + 2 * k + 1] = std::cos(freq[k] * x[i]);
    }
  }
  return detail::make_result<S>({r, c * dim}, std::move(v), {x}, [dim, freq](Node<S>& self) {
    if (S* g = detail::grad_of(self, 0)) {
      const auto& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        S acc = 0;
        for (int k = 0; k < dim / 2; ++k) {
          acc += self.grad[i * dim + 2 * k] * freq[k] * std::cos(freq[k] * xv[i]);
          acc -= self.grad[i * dim + 2 * k + 1] * freq[k] * std::sin(freq[k] * xv[i]);
        }
        g[i] += acc;
      }
    }
  });
}

/// Projects anchor points (x from `xs`, fixed `ys`, z from `zs`, both {Q, N})
/// into the image and returns corner-aligned normalized coordinates
/// {Q*N, 2} = (u / (W-1), v / (H-1)). Points at or behind the camera plane
/// map to (-1, -1), which every sampler treats as outside.
template <class S>
Tensor<S> project_normalized(const Tensor<S>& xs, const std::vector<double>& ys, const Tensor<S>& zs,
                             const CameraRig& rig) {
  detail::check_same(xs.shape(), zs.shape(), "project_normalized");
  const int q = xs.dim(0), n = xs.dim(1);
  if (static_cast<int>(ys.size()) != n) throw ShapeError("project_normalized: y count mismatch");
  const Mat3 r = rig.ground_to_camera().topLeftCorner<3, 3>();
  const Vec3 t = rig.ground_to_camera().topRightCorner<3, 1>();
  const Mat3& k = rig.intrinsics();
  const double su = 1.0 / ::curvelane::detail::span_of(rig.image_size().width);
  const double sv = 1.0 / ::curvelane::detail::span_of(rig.image_size().height);
  // per point d(u_n, v_n)/d(x, z)
  std::vector<double> jac(static_cast<std::size_t>(q) * n * 4, 0.0);
  std::vector<S> out(static_cast<std::size_t>(q) * n * 2);
  for (int i = 0; i < q * n; ++i) {
    const Vec3 p(static_cast<double>(xs[i]), ys[i % n], static_cast<double>(zs[i]));
    const Vec3 c = r * p + t;
    if (c.z() <= kMinDepth) {
      out[2 * i] = S(-1);
      out[2 * i + 1] = S(-1);
      continue;
    }
    const double iz = 1.0 / c.z();
    const double u = (k(0, 0) * c.x() + k(0, 1) * c.y()) * iz + k(0, 2);
    const double v = k(1, 1) * c.y() * iz + k(1, 2);
    out[2 * i] = static_cast<S>(u * su);
    out[2 * i + 1] = static_cast<S>(v * sv);
    const Vec3 du_dc(k(0, 0) * iz, k(0, 1) * iz, -(k(0, 0) * c.x() + k(0, 1) * c.y()) * iz * iz);
    const Vec3 dv_dc(0.0, k(1, 1) * iz, -k(1, 1) * c.y() * iz * iz);
    jac[4 * i + 0] = du_dc.dot(r.col(0)) * su;
    jac[4 * i + 1] = du_dc.dot(r.col(2)) * su;
    jac[4 * i + 2] = dv_dc.dot(r.col(0)) * sv;
    jac[4 * i + 3] = dv_dc.dot(r.col(2)) * sv;
  }
  return detail::make_result<S>({q * n, 2}, std::move(out), {xs, zs}, [jac = std::move(jac)](Node<S>& self) {
    S* gx = detail::grad_of(self, 0);
    S* gz = detail::grad_of(self, 1);
    const std::size_t pts = self.grad.size() / 2;
    for (std::size_t i = 0; i < pts; ++i) {
      const S gu = self.grad[2 * i], gv = self.grad[2 * i + 1];
      if (gx) gx[i] += static_cast<S>(gu * jac[4 * i + 0] + gv * jac[4 * i + 2]);
      if (gz) gz[i] += static_cast<S>(gu * jac[4 * i + 1] + gv * jac[4 * i + 3]);
    }
  });
}

namespace detail {

template <class S>
struct Taps {
  int index[4];
  S w[4], du[4], dv[4];
  bool valid;
};

/// Bilinear taps at level-pixel location (u, v); see core geometry.
template <class S>
Taps<S> taps_at(S u, S v, int h, int w) {
  const BilinearTaps b = bilinear_taps(static_cast<double>(u), static_cast<double>(v), h, w);
  Taps<S> t{};
  t.valid = b.valid;
  for (int i = 0; i < 4; ++i) {
    t.index[i] = b.index[i];
    t.w[i] = static_cast<S>(b.weight[i]);
    t.du[i] = static_cast<S>(b.dweight_du[i]);
    t.dv[i] = static_cast<S>(b.dweight_dv[i]);
  }
  return t;
}

}  // namespace detail

/// Samples map {C, h, w} at normalized coordinates {P, 2}: out {P, C}.
/// Locations outside the map give zero.
template <class S>
Tensor<S> bilinear_gather(const Tensor<S>& map, const Tensor<S>& coords) {
  detail::check_rank(map.shape(), 3, "bilinear_gather");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2), p = coords.dim(0);
  const S ex = static_cast<S>(::curvelane::detail::span_of(w)), ey = static_cast<S>(::curvelane::detail::span_of(h));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<S> out(static_cast<std::size_t>(p) * c, S(0));
  for (int i = 0; i < p; ++i) {
    const auto t = detail::taps_at<S>(coords[2 * i] * ex, coords[2 * i + 1] * ey, h, w);
    if (!t.valid) continue;
    for (int ch = 0; ch < c; ++ch) {
      const S* m = map.data() + ch * plane;
      out[static_cast<std::size_t>(i) * c + ch] =
          t.w[0] * m[t.index[0]] + t.w[1] * m[t.index[1]] + t.w[2] * m[t.index[2]] + t.w[3] * m[t.index[3]];
    }
  }
  return detail::make_result<S>({p, c}, std::move(out), {map, coords}, [c, h, w, p, ex, ey, plane](Node<S>& self) {
    const auto& mv = self.parents[0]->value;
    const auto& cv = self.parents[1]->value;
    S* gm = detail::grad_of(self, 0);
    S* gc = detail::grad_of(self, 1);
    for (int i = 0; i < p; ++i) {
      const auto t = detail::taps_at<S>(cv[2 * i] * ex, cv[2 * i + 1] * ey, h, w);
      if (!t.valid) continue;
      S du = 0, dv = 0;
      for (int ch = 0; ch < c; ++ch) {
        const S go = self.grad[static_cast<std::size_t>(i) * c + ch];
        if (go == S(0)) continue;
        const S* m = mv.data() + ch * plane;
        for (int k = 0; k < 4; ++k) {
          if (gm) gm[ch * plane + t.index[k]] += go * t.w[k];
          du += go * t.du[k] * m[t.index[k]];
          dv += go * t.dv[k] * m[t.index[k]];
        }
      }
      if (gc) {
        gc[2 * i] += du * ex;
        gc[2 * i + 1] += dv * ey;
      }
    }
  });
}

struct DeformableLayout {
  int queries = 0;
  int heads = 0;
  int levels = 0;
  int points = 0;   // anchor points per query
  int samples = 0;  // sampling offsets per anchor point
};

/// Multi-level deformable sampling.
///   values[l]: {D, h_l, w_l}, head m owns channels [m*D/M, (m+1)*D/M)
///   base:      {Q*N, 2} normalized anchor projections shared by all levels
///   offsets:   {Q, M*L*N*K*2} in level pixels
///   attn:      {Q*M, L*N*K} weights
/// out[q, head m] = sum_{l,n,k} attn * values[l]_m(base_n * extent_l + offset).
template <class S>
Tensor<S> deformable_sample(const std::vector<Tensor<S>>& values, const Tensor<S>& base, const Tensor<S>& offsets,
                            const Tensor<S>& attn, DeformableLayout lay) {
  const int Q = lay.queries, M = lay.heads, L = lay.levels, N = lay.points, K = lay.samples;
  if (static_cast<int>(values.size()) != L) throw ShapeError("deformable_sample: level count mismatch");
  const int D = values[0].dim(0);
  if (D % M) throw ShapeError("deformable_sample: channels not divisible by heads");
  if (base.dim(0) != Q * N || offsets.dim(0) != Q || offsets.dim(1) != M * L * N * K * 2 || attn.dim(0) != Q * M ||
      attn.dim(1) != L * N * K) {
    throw ShapeError("deformable_sample: inconsistent shapes");
  }
  const int dh = D / M;
  std::vector<S> out(static_cast<std::size_t>(Q) * D, S(0));
  auto for_each = [=](const auto& fn) {
    for (int q = 0; q < Q; ++q)
      for (int m = 0; m < M; ++m)
        for (int l = 0; l < L; ++l)
          for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) fn(q, m, l, n, k);
  };
  std::vector<int> hs(L), ws(L);
  for (int l = 0; l < L; ++l) {
    if (values[l].dim(0) != D) throw ShapeError("deformable_sample: level channel mismatch");
    hs[l] = values[l].dim(1);
    ws[l] = values[l].dim(2);
  }
  auto location = [=](const std::vector<S>& b, const std::vector<S>& off, int q, int m, int l, int n, int k, S& u, S& v) {
    const std::size_t oi = ((((static_cast<std::size_t>(q) * M + m) * L + l) * N + n) * K + k) * 2;
    u = b[2 * (static_cast<std::size_t>(q) * N + n)] * static_cast<S>(::curvelane::detail::span_of(ws[l])) + off[oi];
    v = b[2 * (static_cast<std::size_t>(q) * N + n) + 1] * static_cast<S>(::curvelane::detail::span_of(hs[l])) + off[oi + 1];
    return oi;
  };
  for_each([&](int q, int m, int l, int n, int k) {
    const S a = attn[(static_cast<std::size_t>(q) * M + m) * (L * N * K) + (l * N + n) * K + k];
    if (a == S(0)) return;
    S u, v;
    location(base.values(), offsets.values(), q, m, l, n, k, u, v);
    const auto t = detail::taps_at<S>(u, v, hs[l], ws[l]);
    if (!t.valid) return;
    const std::size_t plane = static_cast<std::size_t>(hs[l]) * ws[l];
    const S* vm = values[l].data();
    S* o = out.data() + static_cast<std::size_t>(q) * D + m * dh;
    for (int c = 0; c < dh; ++c) {
      const S* ch = vm + (m * dh + c) * plane;
      o[c] += a * (t.w[0] * ch[t.index[0]] + t.w[1] * ch[t.index[1]] + t.w[2] * ch[t.index[2]] + t.w[3] * ch[t.index[3]]);
    }
  });
  std::vector<Tensor<S>> inputs(values.begin(), values.end());
  inputs.push_back(base);
  inputs.push_back(offsets);
  inputs.push_back(attn);
  return detail::make_result<S>({Q, D}, std::move(out), std::move(inputs),
                                [=](Node<S>& self) {
    const auto& bv = self.parents[L]->value;
    const auto& ov = self.parents[L + 1]->value;
    const auto& av = self.parents[L + 2]->value;
    S* gb = detail::grad_of(self, static_cast<std::size_t>(L));
    S* go_ = detail::grad_of(self, static_cast<std::size_t>(L + 1));
    S* ga = detail::grad_of(self, static_cast<std::size_t>(L + 2));
    std::vector<S*> gv(L);
    for (int l = 0; l < L; ++l) gv[l] = detail::grad_of(self, static_cast<std::size_t>(l));
    for_each([&](int q, int m, int l, int n, int k) {
      const std::size_t ai = (static_cast<std::size_t>(q) * M + m) * (L * N * K) + (l * N + n) * K + k;
      const S a = av[ai];
      S u, v;
      const std::size_t oi = location(bv, ov, q, m, l, n, k, u, v);
      const auto t = detail::taps_at<S>(u, v, hs[l], ws[l]);
      if (!t.valid) return;
      const std::size_t plane = static_cast<std::size_t>(hs[l]) * ws[l];
      const S* vm = self.parents[l]->value.data();
      const S* g = self.grad.data() + static_cast<std::size_t>(q) * D + m * dh;
      S da = 0, du = 0, dv = 0;
      for (int c = 0; c < dh; ++c) {
        const S* ch = vm + (m * dh + c) * plane;
        S smp = 0, su = 0, sv = 0;
        for (int i = 0; i < 4; ++i) {
          const S val = ch[t.index[i]];
          smp += t.w[i] * val;
          su += t.du[i] * val;
          sv += t.dv[i] * val;
        }
        da += g[c] * smp;
        du += g[c] * su;
        dv += g[c] * sv;
        if (gv[l] && a != S(0)) {
          S* gch = gv[l] + (m * dh + c) * plane;
          for (int i = 0; i < 4; ++i) gch[t.index[i]] += a * t.w[i] * g[c];
        }
      }
      if (ga) ga[ai] += da;
      if (a == S(0)) return;
      if (go_) {
        go_[oi] += a * du;
        go_[oi + 1] += a * dv;
      }
      if (gb) {
        gb[2 * (static_cast<std::size_t>(q) * N + n)] += a * du * static_cast<S>(::curvelane::detail::span_of(ws[l]));
        gb[2 * (static_cast<std::size_t>(q) * N + n) + 1] += a * dv * static_cast<S>(::curvelane::detail::span_of(hs[l]));
      }
    });
  });
}

}  // namespace curvelane::ag
