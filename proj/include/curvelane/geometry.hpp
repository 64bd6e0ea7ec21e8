#pragma once

// Coordinate frames, camera projection, ego-motion transforms and bilinear
// sampling shared by the rest of the library.
//
// Ground frame: x lateral (right), y longitudinal (forward), z up, meters.
// Camera frame: x right, y down, z along the optical axis.
// Pixel coordinates: u column, v row, pixel centers at integers.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool is_rigid(const Mat4& t, double tol = 1e-9) {
  if (!t.allFinite()) return false;
  const Mat3 r = t.topLeftCorner<3, 3>();
  const Mat3 err = r.transpose() * r - Mat3::Identity();
  if (err.cwiseAbs().maxCoeff() >= tol) return false;
  if (std::abs(r.determinant() - 1.0) >= tol) return false;
  const Eigen::RowVector4d last = t.row(3);
  return (last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() < tol;
}

}  // namespace detail

/// Rigid transform taking ground-frame points at time t-i into the ground
/// frame at time t.
class EgoMotion {
 public:
  EgoMotion() : transform_(Mat4::Identity()) {}

  explicit EgoMotion(const Mat4& transform) : transform_(transform) {
    if (!detail::is_rigid(transform_)) {
      throw GeometryError("EgoMotion: transform is not rigid (orthonormal rotation, det +1)");
    }
  }

  /// Yaw about +z (radians, counter-clockwise seen from above) followed by a
  /// translation.
  static EgoMotion from_yaw_translation(double yaw, const Vec3& translation) {
    Mat4 t = Mat4::Identity();
    t.topLeftCorner<3, 3>() = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    t.topRightCorner<3, 1>() = translation;
    return EgoMotion(t);
  }

  const Mat4& matrix() const { return transform_; }
  Mat3 rotation() const { return transform_.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return transform_.topRightCorner<3, 1>(); }

  Vec3 apply(const Vec3& p) const { return rotation() * p + translation(); }

  /// Applies `this` first, then `next`: next.matrix() * matrix().
  EgoMotion then(const EgoMotion& next) const {
    return EgoMotion::unchecked(next.transform_ * transform_);
  }

  EgoMotion inverse() const {
    Mat4 inv = Mat4::Identity();
    const Mat3 rt = rotation().transpose();
    inv.topLeftCorner<3, 3>() = rt;
    inv.topRightCorner<3, 1>() = -rt * translation();
    return EgoMotion::unchecked(inv);
  }

  bool is_identity(double tol = 0.0) const {
    return (transform_ - Mat4::Identity()).cwiseAbs().maxCoeff() <= tol;
  }

 private:
  static EgoMotion unchecked(const Mat4& t) {
    EgoMotion m;
    m.transform_ = t;
    return m;
  }

  Mat4 transform_;
};

inline std::vector<Vec3> transform_points_ego(std::span<const Vec3> points, const EgoMotion& motion) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  const Mat3 r = motion.rotation();
  const Vec3 t = motion.translation();
  for (const auto& p : points) out.emplace_back(r * p + t);
  return out;
}

struct ImageSize {
  int height = 0;
  int width = 0;
  bool operator==(const ImageSize&) const = default;
};

/// Pinhole camera with intrinsics and a rigid ground-to-camera transform.
class CameraRig {
 public:
  CameraRig() = default;

  CameraRig(const Mat3& intrinsics, const Mat4& ground_to_camera, ImageSize size)
      : intrinsics_(intrinsics), ground_to_camera_(ground_to_camera), size_(size) {
    validate();
  }

  /// Forward-looking camera mounted `height` meters above the ground origin,
  /// pitched down by `pitch` radians, principal point at the image center.
  static CameraRig looking_forward(ImageSize size, double focal, double height, double pitch) {
    Mat3 k = Mat3::Identity();
    k(0, 0) = focal;
    k(1, 1) = focal;
    k(0, 2) = 0.5 * (size.width - 1);
    k(1, 2) = 0.5 * (size.height - 1);

    // Axis swap ground -> camera at zero pitch: Xc = x, Yc = -z, Zc = y.
    Mat3 axes;
    axes << 1, 0, 0,
            0, 0, -1,
            0, 1, 0;
    const Mat3 pitch_rot = Eigen::AngleAxisd(-pitch, Vec3::UnitX()).toRotationMatrix();
    const Mat3 r = pitch_rot * axes;
    Mat4 t = Mat4::Identity();
    t.topLeftCorner<3, 3>() = r;
    t.topRightCorner<3, 1>() = -r * Vec3(0, 0, height);
    return CameraRig(k, t, size);
  }

  const Mat3& intrinsics() const { return intrinsics_; }
  const Mat4& ground_to_camera() const { return ground_to_camera_; }
  ImageSize image_size() const { return size_; }

  double fx() const { return intrinsics_(0, 0); }
  double fy() const { return intrinsics_(1, 1); }
  double cx() const { return intrinsics_(0, 2); }
  double cy() const { return intrinsics_(1, 2); }
  double skew() const { return intrinsics_(0, 1); }

  Vec3 to_camera(const Vec3& p) const {
    return ground_to_camera_.topLeftCorner<3, 3>() * p + ground_to_camera_.topRightCorner<3, 1>();
  }

  void validate() const {
    if (!(intrinsics_(0, 0) > 0.0) || !(intrinsics_(1, 1) > 0.0)) {
      throw GeometryError("CameraRig: focal lengths must be positive");
    }
    if (intrinsics_(1, 0) != 0.0 || intrinsics_(2, 0) != 0.0 || intrinsics_(2, 1) != 0.0 ||
        intrinsics_(2, 2) != 1.0) {
      throw GeometryError("CameraRig: intrinsics must be upper triangular with K(2,2) = 1");
    }
    if (!detail::is_rigid(ground_to_camera_)) {
      throw GeometryError("CameraRig: ground_to_camera is not a rigid transform");
    }
    if (size_.height <= 0 || size_.width <= 0) {
      throw GeometryError("CameraRig: image size must be positive");
    }
  }

  bool operator==(const CameraRig& o) const {
    return intrinsics_ == o.intrinsics_ && ground_to_camera_ == o.ground_to_camera_ && size_ == o.size_;
  }

 private:
  Mat3 intrinsics_ = Mat3::Identity();
  Mat4 ground_to_camera_ = Mat4::Identity();
  ImageSize size_{};
};

struct ProjectionResult {
  std::vector<Vec2> points2d;
  std::vector<std::uint8_t> validity;
  double epsilon = 1e-6;
};

/// Smallest camera depth treated as "in front of the camera".
inline constexpr double kMinDepth = 1e-6;

inline bool inside_image(const Vec2& uv, ImageSize size) {
  return uv.x() >= 0.0 && uv.x() <= size.width - 1 && uv.y() >= 0.0 && uv.y() <= size.height - 1;
}

inline ProjectionResult project_to_image(std::span<const Vec3> points, const CameraRig& rig) {
  ProjectionResult out;
  out.points2d.reserve(points.size());
  out.validity.reserve(points.size());
  const Mat3& k = rig.intrinsics();
  for (const auto& p : points) {
    const Vec3 c = rig.to_camera(p);
    if (c.z() <= kMinDepth) {
      out.points2d.emplace_back(0.0, 0.0);
      out.validity.push_back(0);
      continue;
    }
    const Vec3 h = k * c;
    const Vec2 uv(h.x() / h.z(), h.y() / h.z());
    out.points2d.push_back(uv);
    out.validity.push_back(inside_image(uv, rig.image_size()) ? 1 : 0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling

/// Four interpolation taps; weights sum to one when `valid`.
struct BilinearTaps {
  std::array<int, 4> index{};  // flattened row-major cell index (row * width + col)
  std::array<double, 4> weight{};
  // d weight / du and d weight / dv for each tap
  std::array<double, 4> dweight_du{};
  std::array<double, 4> dweight_dv{};
  bool valid = false;
};

/// Taps for a query at (u, v) on a height x width grid. Queries outside
/// [0, width-1] x [0, height-1] are invalid and sample to zero.
inline BilinearTaps bilinear_taps(double u, double v, int height, int width) {
  BilinearTaps t;
  if (!(u >= 0.0 && v >= 0.0 && u <= width - 1 && v <= height - 1)) return t;
  const int x0 = std::min(static_cast<int>(std::floor(u)), width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(v)), height - 1);
  const int x1 = std::min(x0 + 1, width - 1);
  const int y1 = std::min(y0 + 1, height - 1);
  const double fx = u - x0;
  const double fy = v - y0;
  t.index = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
  t.weight = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  t.dweight_du = {-(1 - fy), (1 - fy), -fy, fy};
  t.dweight_dv = {-(1 - fx), -fx, (1 - fx), fx};
  t.valid = true;
  return t;
}

/// Dense H x W x D grid, row-major with the feature dimension innermost.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<double> data;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int d) : height(h), width(w), depth(d), data(static_cast<std::size_t>(h) * w * d, 0.0) {}

  double& at(int row, int col, int k) { return data[(static_cast<std::size_t>(row) * width + col) * depth + k]; }
  double at(int row, int col, int k) const { return data[(static_cast<std::size_t>(row) * width + col) * depth + k]; }
};

inline std::vector<double> bilinear_sample(const FeatureGrid& grid, const Vec2& uv) {
  if (grid.height <= 0 || grid.width <= 0 || grid.depth <= 0) {
    throw GeometryError("bilinear_sample: empty feature map");
  }
  std::vector<double> out(grid.depth, 0.0);
  const auto taps = bilinear_taps(uv.x(), uv.y(), grid.height, grid.width);
  if (!taps.valid) return out;
  for (int t = 0; t < 4; ++t) {
    const double w = taps.weight[t];
    if (w == 0.0) continue;
    const double* cell = grid.data.data() + static_cast<std::size_t>(taps.index[t]) * grid.depth;
    for (int k = 0; k < grid.depth; ++k) out[k] += w * cell[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corner-aligned coordinate normalization: 0 is the first pixel center and 1
// the last one. Together these realize the per-level rescaling of normalized
// anchor coordinates onto each feature map.

struct LevelExtent {
  int height = 0;
  int width = 0;
};

namespace detail {
inline void check_extent(const LevelExtent& e) {
  if (e.height <= 0 || e.width <= 0) {
    throw GeometryError("invalid feature level extent " + std::to_string(e.height) + "x" +
                        std::to_string(e.width));
  }
}
inline double span_of(int n) { return n > 1 ? static_cast<double>(n - 1) : 1.0; }
}  // namespace detail

inline Vec2 normalize_coords(const Vec2& p, const LevelExtent& extent) {
  detail::check_extent(extent);
  return {p.x() / detail::span_of(extent.width), p.y() / detail::span_of(extent.height)};
}

inline Vec2 denormalize_coords(const Vec2& p, const LevelExtent& extent) {
  detail::check_extent(extent);
  return {p.x() * detail::span_of(extent.width), p.y() * detail::span_of(extent.height)};
}

}  // namespace curvelane
