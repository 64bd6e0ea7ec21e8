#pragma once

// Independent reference computations for the metric tests.

#include "curvelane/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testutil {

using curvelane::Vec3;

/// x = a + b*y, z = c on [y0, y1].
struct Line {
  double a = 0, b = 0, c = 0, y0 = 3, y1 = 103;
  bool covers(double y) const { return y >= y0 && y <= y1; }
  double x(double y) const { return a + b * y; }
};

inline curvelane::GroundTruthLane line_lane(const Line& l, double step = 0.5) {
  curvelane::GroundTruthLane g;
  const int n = static_cast<int>(std::round((l.y1 - l.y0) / step));
  for (int i = 0; i <= n; ++i) {
    const double y = l.y0 + (l.y1 - l.y0) * i / n;
    g.points.emplace_back(l.x(y), y, l.c);
  }
  return g;
}

inline curvelane::EvalLane line_eval(const Line& l, const std::vector<double>& ys) {
  return curvelane::eval_lane(line_lane(l), ys);
}

/// Candidate test straight from the line equations.
inline bool line_candidate(const Line& p, const Line& g, const std::vector<double>& ys, double max_d,
                           double coverage) {
  int uni = 0, close = 0;
  for (double y : ys) {
    const bool cp = p.covers(y), cg = g.covers(y);
    if (!cp && !cg) continue;
    ++uni;
    if (cp && cg) {
      const double dx = p.x(y) - g.x(y), dz = p.c - g.c;
      if (std::sqrt(dx * dx + dz * dz) < max_d) ++close;
    }
  }
  return uni > 0 && close >= coverage * uni;
}

/// Largest one-to-one matching over a candidate table by exhaustive search.
inline int enumerate_max_matching(const std::vector<std::vector<bool>>& cand) {
  const int np = static_cast<int>(cand.size());
  const int ng = np ? static_cast<int>(cand[0].size()) : 0;
  std::vector<bool> used(ng, false);
  std::function<int(int)> rec = [&](int p) -> int {
    if (p == np) return 0;
    int best = rec(p + 1);  // p unmatched
    for (int g = 0; g < ng; ++g) {
      if (used[g] || !cand[p][g]) continue;
      used[g] = true;
      best = std::max(best, 1 + rec(p + 1));
      used[g] = false;
    }
    return best;
  };
  return rec(0);
}

inline double point_segment_distance(double px, double py, double ax, double ay, double bx, double by, bool* inside) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  *inside = t >= 0 && t <= 1;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

/// True when (px, py) lies in the flat-capped stroke of half width h.
inline bool in_stroke(const std::vector<Vec3>& pts, double px, double py, double h) {
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    bool inside = false;
    const double d = point_segment_distance(px, py, pts[i].x(), pts[i].y(), pts[i + 1].x(), pts[i + 1].y(), &inside);
    if (inside && d <= h) return true;
  }
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    if (std::hypot(px - pts[i].x(), py - pts[i].y()) <= h) return true;  // round joins
  }
  return false;
}

/// Top-view IoU counted on a dense pixel grid.
inline double raster_iou(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double width, double pixel) {
  double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
  for (const auto* s : {&a, &b})
    for (const auto& p : *s) {
      xlo = std::min(xlo, p.x());
      xhi = std::max(xhi, p.x());
      ylo = std::min(ylo, p.y());
      yhi = std::max(yhi, p.y());
    }
  xlo -= width;
  xhi += width;
  ylo -= width;
  yhi += width;
  const double h = 0.5 * width;
  long inter = 0, uni = 0;
  for (double y = ylo + 0.5 * pixel; y < yhi; y += pixel) {
    for (double x = xlo + 0.5 * pixel; x < xhi; x += pixel) {
      const bool ia = in_stroke(a, x, y, h), ib = in_stroke(b, x, y, h);
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double textbook_population_std(const std::vector<double>& v) {
  double s = 0, s2 = 0;
  for (double x : v) s += x;
  const double m = s / v.size();
  for (double x : v) s2 += (x - m) * (x - m);
  return std::sqrt(s2 / v.size());
}

/// A 3-gt, 4-pred case whose preds sit near or away from the gts.
struct ConstructedCase {
  std::vector<Line> gts, preds;
};

inline ConstructedCase constructed_case(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  ConstructedCase c;
  for (int g = 0; g < 3; ++g) {
    Line l;
    l.a = -6 + 4 * g + u(rng);
    l.b = 0.02 * (u(rng) - 0.5);
    l.c = 0.3 * u(rng);
    l.y0 = 3 + 20 * u(rng);
    l.y1 = l.y0 + 30 + 50 * u(rng);
    c.gts.push_back(l);
  }
  for (int p = 0; p < 4; ++p) {
    Line l = c.gts[static_cast<int>(u(rng) * 3) % 3];
    l.a += 2.5 * (u(rng) - 0.5);  // may or may not stay within the distance limit
    l.b += 0.01 * (u(rng) - 0.5);
    l.c += 0.4 * (u(rng) - 0.5);
    if (u(rng) < 0.4) l.y1 = l.y0 + (l.y1 - l.y0) * (0.5 + 0.5 * u(rng));  // shortened
    c.preds.push_back(l);
  }
  return c;
}

}  // namespace testutil
