#pragma once

// Deterministic synthetic driving sequences: static lanes in a world frame,
// an ego vehicle driving forward with a bounded yaw rate, per-frame ground
// truth expressed in that frame's ground coordinates, and a rasterizer that
// turns lanes into an image plus a binary segmentation mask.

#include "curvelane/geometry.hpp"
#include "curvelane/image.hpp"
#include "curvelane/lane_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

class SyntheticError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LaneGeometry { straight, arc, polynomial };

inline const char* to_string(LaneGeometry g) {
  switch (g) {
    case LaneGeometry::straight: return "straight";
    case LaneGeometry::arc: return "arc";
    case LaneGeometry::polynomial: return "polynomial";
  }
  return "?";
}

inline LaneGeometry lane_geometry_from_string(const std::string& s) {
  if (s == "straight") return LaneGeometry::straight;
  if (s == "arc") return LaneGeometry::arc;
  if (s == "polynomial") return LaneGeometry::polynomial;
  throw SyntheticError("unknown lane geometry '" + s + "'");
}

struct CameraConfig {
  double focal = 260.0;
  double height = 1.6;
  double pitch = 0.03;  // radians, positive looks down
};

struct SceneConfig {
  int min_lanes = 2;
  int max_lanes = 6;
  LaneGeometry geometry = LaneGeometry::polynomial;
  double lane_spacing = 3.6;
  double spacing_jitter = 0.3;
  double max_heading = 0.04;       // |dx/dy| at the ego origin
  double max_curvature = 1.0 / 600.0;
  double hill_amplitude = 1.5;     // meters
  double hill_wavelength = 140.0;  // meters
  double grade = 0.0;              // linear z slope added to the hill profile
  // Visible lane length in the first frame; a non-positive maximum means the
  // lanes extend past both ends of the range box.
  double min_lane_length = 0.0;
  double max_lane_length = 0.0;
  double ego_speed = 1.5;          // meters per frame
  double max_yaw_rate = 0.004;     // radians per frame
  double sample_spacing = 0.5;     // meters between dense ground-truth points
  ImageSize image{360, 480};
  CameraConfig camera{};
  double stroke_width = 3.0;       // pixels
  double noise_amplitude = 0.08;
  WorldBox box{};
  std::uint64_t seed = 7;
};

struct FrameSample {
  std::string sequence_id;
  int index = 0;
  Image image;
  Mask seg_mask;
  std::vector<GroundTruthLane> lanes;
  CameraRig rig;
  EgoMotion ego_motion_from_prev;
};

inline CameraRig make_rig(const SceneConfig& cfg) {
  return CameraRig::looking_forward(cfg.image, cfg.camera.focal, cfg.camera.height, cfg.camera.pitch);
}

inline std::string sequence_name(int sequence_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%04d", sequence_index);
  return buf;
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over the pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct WorldLane {
  double offset = 0.0;
  double heading = 0.0;
  double curvature = 0.0;  // arc: signed 1/R, polynomial: quadratic term scale
  double cubic = 0.0;
  double y_begin = 0.0;
  double y_end = 0.0;
  int category = 0;
  int track_id = 0;
};

struct World {
  LaneGeometry geometry = LaneGeometry::straight;
  std::vector<WorldLane> lanes;
  double hill_amplitude = 0.0;
  double hill_wavelength = 1.0;
  double hill_phase = 0.0;
  double grade = 0.0;

  double lateral(const WorldLane& l, double y) const {
    switch (geometry) {
      case LaneGeometry::straight:
        return l.offset + l.heading * y;
      case LaneGeometry::arc: {
        if (l.curvature == 0.0) return l.offset + l.heading * y;
        const double r = 1.0 / std::abs(l.curvature);
        const double yy = std::clamp(y, -0.95 * r, 0.95 * r);
        const double sag = r - std::sqrt(r * r - yy * yy);
        return l.offset + l.heading * y + (l.curvature > 0 ? sag : -sag);
      }
      case LaneGeometry::polynomial:
        return l.offset + l.heading * y + 0.5 * l.curvature * y * y + l.cubic * y * y * y;
    }
    return 0.0;
  }

  double height(double y) const {
    return hill_amplitude * std::sin(2.0 * M_PI * y / hill_wavelength + hill_phase) -
           hill_amplitude * std::sin(hill_phase) + grade * y;
  }
};

inline World make_world(const SceneConfig& cfg, std::mt19937_64& rng, double travel) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  World w;
  w.geometry = cfg.geometry;
  w.hill_amplitude = cfg.hill_amplitude * uniform(0.5, 1.0);
  w.hill_wavelength = cfg.hill_wavelength * uniform(0.8, 1.2);
  w.hill_phase = uniform(0.0, 2.0 * M_PI);
  w.grade = cfg.grade;

  if (cfg.min_lanes < 1 || cfg.max_lanes < cfg.min_lanes) throw SyntheticError("invalid lane count range");
  std::uniform_int_distribution<int> count_dist(cfg.min_lanes, cfg.max_lanes);
  const int n = count_dist(rng);
  const double heading = uniform(-cfg.max_heading, cfg.max_heading);
  const double curvature = uniform(-cfg.max_curvature, cfg.max_curvature);
  const double cubic = cfg.geometry == LaneGeometry::polynomial ? uniform(-1.0, 1.0) * cfg.max_curvature / 300.0 : 0.0;
  const double center_shift = uniform(-0.5, 0.5) * cfg.lane_spacing;

  for (int i = 0; i < n; ++i) {
    WorldLane l;
    l.offset = (i - 0.5 * (n - 1)) * cfg.lane_spacing + center_shift + uniform(-1.0, 1.0) * cfg.spacing_jitter;
    l.heading = heading;
    l.curvature = curvature;
    l.cubic = cubic;
    l.category = (i == 0 || i == n - 1) ? 0 : 1;
    l.track_id = i;
    if (cfg.max_lane_length > 0.0) {
      const double len = uniform(cfg.min_lane_length, cfg.max_lane_length);
      const double span = cfg.box.y.span();
      l.y_begin = cfg.box.y.lo + uniform(0.0, std::max(0.0, span - len));
      l.y_end = l.y_begin + len;
    } else {
      l.y_begin = cfg.box.y.lo - 20.0;
      l.y_end = cfg.box.y.hi + travel + 20.0;
    }
    w.lanes.push_back(l);
  }
  return w;
}

/// Longest contiguous run of points inside the box.
inline std::vector<Vec3> longest_run_in_box(const std::vector<Vec3>& pts, const WorldBox& box) {
  std::size_t best_begin = 0, best_len = 0, begin = 0, len = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (box.contains(pts[i])) {
      if (len == 0) begin = i;
      ++len;
      if (len > best_len) {
        best_len = len;
        best_begin = begin;
      }
    } else {
      len = 0;
    }
  }
  return {pts.begin() + static_cast<std::ptrdiff_t>(best_begin),
          pts.begin() + static_cast<std::ptrdiff_t>(best_begin + best_len)};
}

inline double point_segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline float value_noise(std::uint64_t seed, int row, int col) {
  const std::uint64_t h = mix_seed(seed, (static_cast<std::uint64_t>(row) << 32) ^ static_cast<std::uint64_t>(col));
  return static_cast<float>((h >> 11) * (1.0 / 9007199254740992.0));
}

}  // namespace detail

struct Segment2 {
  Vec2 a;
  Vec2 b;
};

/// Image-plane segments of each lane: consecutive projected ground-truth
/// points with positive depth.
inline std::vector<Segment2> projected_segments(const std::vector<GroundTruthLane>& lanes, const CameraRig& rig) {
  std::vector<Segment2> segs;
  for (const auto& lane : lanes) {
    std::vector<Vec2> uv;
    std::vector<bool> front;
    for (const auto& p : lane.points) {
      const Vec3 c = rig.to_camera(p);
      front.push_back(c.z() > kMinDepth);
      const Vec3 h = rig.intrinsics() * c;
      uv.emplace_back(h.x() / h.z(), h.y() / h.z());
    }
    for (std::size_t i = 1; i < uv.size(); ++i) {
      if (front[i - 1] && front[i]) segs.push_back({uv[i - 1], uv[i]});
    }
  }
  return segs;
}

/// Draws every lane as a stroke of `stroke_width` pixels. The mask marks pixel
/// centers within stroke_width / 2 of a projected lane segment; the image adds
/// an anti-aliased stroke over a noisy road texture.
inline std::pair<Image, Mask> rasterize_frame(const std::vector<GroundTruthLane>& lanes, const CameraRig& rig,
                                              double stroke_width, double noise_amplitude = 0.0,
                                              std::uint64_t noise_seed = 0) {
  const ImageSize size = rig.image_size();
  Image img(size.height, size.width, 3);
  Mask mask(size.height, size.width);
  std::vector<float> alpha(static_cast<std::size_t>(size.height) * size.width, 0.0f);
  std::vector<int> category(alpha.size(), -1);
  const double half = 0.5 * stroke_width;

  for (std::size_t li = 0; li < lanes.size(); ++li) {
    const auto segs = projected_segments({lanes[li]}, rig);
    for (const auto& s : segs) {
      const double pad = half + 1.0;
      const int c0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x(), s.b.x()) - pad)));
      const int c1 = std::min(size.width - 1, static_cast<int>(std::ceil(std::max(s.a.x(), s.b.x()) + pad)));
      const int r0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y(), s.b.y()) - pad)));
      const int r1 = std::min(size.height - 1, static_cast<int>(std::ceil(std::max(s.a.y(), s.b.y()) + pad)));
      for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
          const double d = detail::point_segment_distance(Vec2(c, r), s.a, s.b);
          const std::size_t idx = static_cast<std::size_t>(r) * size.width + c;
          if (d <= half) mask.data[idx] = 1;
          const float a = static_cast<float>(std::clamp(half + 0.5 - d, 0.0, 1.0));
          if (a > alpha[idx]) {
            alpha[idx] = a;
            category[idx] = lanes[li].category;
          }
        }
      }
    }
  }

  for (int r = 0; r < size.height; ++r) {
    for (int c = 0; c < size.width; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * size.width + c;
      const float n = noise_amplitude > 0.0
                          ? static_cast<float>(noise_amplitude) * (detail::value_noise(noise_seed, r / 2, c / 2) - 0.5f)
                          : 0.0f;
      const float bg = 0.35f + n;
      const float a = alpha[idx];
      const float lane_rgb[3] = {1.0f, category[idx] == 1 ? 0.85f : 1.0f, category[idx] == 1 ? 0.25f : 1.0f};
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = quantize8(bg * (1.0f - a) + lane_rgb[ch] * a);
    }
  }
  return {std::move(img), std::move(mask)};
}

/// Generates `length` frames of one sequence. Frames are deterministic in
/// (config.seed, sequence_index).
inline std::vector<FrameSample> generate_sequence(const SceneConfig& cfg, int length, int sequence_index = 0) {
  if (length < 1) throw SyntheticError("generate_sequence: length must be >= 1");
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(sequence_index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double travel = cfg.ego_speed * (length - 1);
  const detail::World world = detail::make_world(cfg, rng, travel);
  const double yaw_rate = (2.0 * unit(rng) - 1.0) * cfg.max_yaw_rate;
  const CameraRig rig = make_rig(cfg);
  const std::uint64_t noise_seed = detail::mix_seed(cfg.seed ^ 0xA5A5A5A5ULL, static_cast<std::uint64_t>(sequence_index));

  // Dense world samples per lane.
  std::vector<std::vector<Vec3>> world_points;
  for (const auto& l : world.lanes) {
    std::vector<Vec3> pts;
    const int count = static_cast<int>(std::floor((l.y_end - l.y_begin) / cfg.sample_spacing)) + 1;
    for (int i = 0; i < count; ++i) {
      const double y = l.y_begin + i * cfg.sample_spacing;
      pts.emplace_back(world.lateral(l, y), y, world.height(y));
    }
    world_points.push_back(std::move(pts));
  }

  // Per-frame increment in the previous frame's coordinates: advance along +y,
  // then yaw. The recorded motion maps previous-frame points into this frame.
  const EgoMotion step = EgoMotion::from_yaw_translation(yaw_rate, Vec3(0.0, cfg.ego_speed, 0.0));
  const EgoMotion motion = step.inverse();

  std::vector<FrameSample> frames;
  frames.reserve(length);
  EgoMotion world_to_frame;  // identity at frame 0
  for (int t = 0; t < length; ++t) {
    if (t > 0) world_to_frame = world_to_frame.then(motion);
    FrameSample f;
    f.sequence_id = sequence_name(sequence_index);
    f.index = t;
    f.rig = rig;
    f.ego_motion_from_prev = t == 0 ? EgoMotion() : motion;
    for (std::size_t li = 0; li < world.lanes.size(); ++li) {
      auto pts = detail::longest_run_in_box(transform_points_ego(world_points[li], world_to_frame), cfg.box);
      if (pts.size() < 2) continue;
      std::stable_sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) { return a.y() < b.y(); });
      GroundTruthLane gt;
      gt.points = std::move(pts);
      gt.category = world.lanes[li].category;
      gt.track_id = world.lanes[li].track_id;
      f.lanes.push_back(std::move(gt));
    }
    if (f.lanes.empty()) {
      throw SyntheticError("generate_sequence: frame " + std::to_string(t) + " has no visible lanes");
    }
    auto [img, mask] = rasterize_frame(f.lanes, rig, cfg.stroke_width, cfg.noise_amplitude, noise_seed + t);
    f.image = std::move(img);
    f.seg_mask = std::move(mask);
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace curvelane
