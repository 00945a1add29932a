#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <vector>

namespace f3r {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using RotationMatrix = Eigen::Matrix3d;

struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

// Rotation helpers about the canonical axes, angle in degrees.
RotationMatrix rot_x(double deg);
RotationMatrix rot_y(double deg);
RotationMatrix rot_z(double deg);

bool is_rotation(const RotationMatrix& r, double tol = 1e-9);

// Nearest proper rotation (polar factor via SVD).
RotationMatrix orthonormalize(const Mat3& m);

struct RigidTransform {
  RotationMatrix rotation = RotationMatrix::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

struct SimilarityTransform {
  double scale = 1.0;
  RotationMatrix rotation = RotationMatrix::Identity();
  Vec3 translation = Vec3::Zero();

  static SimilarityTransform identity() { return {}; }
  static SimilarityTransform from_rigid(const RigidTransform& t) {
    return {1.0, t.rotation, t.translation};
  }
  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  SimilarityTransform inverse() const;
};

// Applies b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);

struct CameraIntrinsics {
  double focal = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

// Pixel (col, row) has its center at (col + 0.5, row + 0.5); the principal
// point of a centered camera is therefore (w / 2, h / 2).
CameraIntrinsics centered_intrinsics(std::size_t h, std::size_t w, double fov_x_deg);

/// Camera-to-world pose; the world frame is the first camera's frame.
struct CameraModel {
  CameraIntrinsics intrinsics;
  RigidTransform pose;
};

enum class Frame : std::uint8_t { Local = 0, Global = 1 };

struct Pointmap {
  std::size_t height = 0;
  std::size_t width = 0;
  Frame frame = Frame::Local;
  std::vector<Vec3> points;         // row-major, height * width
  std::vector<std::uint8_t> valid;  // 1 where the pixel carries geometry

  Pointmap() = default;
  Pointmap(std::size_t h, std::size_t w, Frame f)
      : height(h), width(w), frame(f), points(h * w, Vec3::Zero()), valid(h * w, 1) {}

  std::size_t size() const { return points.size(); }
  Vec3& at(std::size_t row, std::size_t col) { return points[row * width + col]; }
  const Vec3& at(std::size_t row, std::size_t col) const { return points[row * width + col]; }
  std::size_t valid_count() const;
};

inline constexpr double kConfidenceClamp = 20.0;

/// Raw confidence scores, clamped to [-20, 20] on construction.
class ConfidenceMap {
 public:
  ConfidenceMap() = default;
  ConfidenceMap(std::size_t h, std::size_t w, double fill = 0.0);
  ConfidenceMap(std::size_t h, std::size_t w, std::vector<double> raw);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return raw_.size(); }
  double raw(std::size_t i) const { return raw_[i]; }
  void set_raw(std::size_t i, double value);
  const std::vector<double>& raw_values() const { return raw_; }
  /// 1 + exp(raw)
  double positive(std::size_t i) const;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> raw_;
};

/// N images of identical size, interleaved RGB in [0, 1].
struct ImageSet {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // count * height * width * 3

  ImageSet() = default;
  ImageSet(std::size_t n, std::size_t h, std::size_t w)
      : count(n), height(h), width(w), pixels(n * h * w * 3, 0.0f) {}

  std::size_t view_stride() const { return height * width * 3; }
  const float* view(std::size_t i) const { return pixels.data() + i * view_stride(); }
  float* view(std::size_t i) { return pixels.data() + i * view_stride(); }
};

Pointmap transform_pointmap(const Pointmap& pm, const SimilarityTransform& t);

/// Throws NonPositiveDepth when p.z <= 1e-12.
Pixel project(const Vec3& p, const CameraIntrinsics& k);
/// Point at z = depth seen through pixel (u, v).
Vec3 unproject(double u, double v, double depth, const CameraIntrinsics& k);

/// Geodesic angle of a^T b, in [0, 180].
double rotation_angle_deg(const RotationMatrix& a, const RotationMatrix& b);
/// Angle between directions; 0 if both are (near) zero, 180 if exactly one is.
double translation_angle_deg(const Vec3& a, const Vec3& b);

}  // namespace f3r
