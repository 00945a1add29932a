#include "f3r/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "f3r/error.hpp"

namespace f3r {

namespace {

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace

RotationMatrix rot_x(double deg) {
  return Eigen::AngleAxisd(deg_to_rad(deg), Vec3::UnitX()).toRotationMatrix();
}

RotationMatrix rot_y(double deg) {
  return Eigen::AngleAxisd(deg_to_rad(deg), Vec3::UnitY()).toRotationMatrix();
}

RotationMatrix rot_z(double deg) {
  return Eigen::AngleAxisd(deg_to_rad(deg), Vec3::UnitZ()).toRotationMatrix();
}

bool is_rotation(const RotationMatrix& r, double tol) {
  if (!r.allFinite()) return false;
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

RotationMatrix orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

SimilarityTransform SimilarityTransform::inverse() const {
  SimilarityTransform inv;
  inv.scale = 1.0 / scale;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.scale * (inv.rotation * translation));
  return inv;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

RigidTransform invert(const RigidTransform& t) {
  const RotationMatrix rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

CameraIntrinsics centered_intrinsics(std::size_t h, std::size_t w, double fov_x_deg) {
  CameraIntrinsics k;
  k.focal = (static_cast<double>(w) / 2.0) / std::tan(deg_to_rad(fov_x_deg) / 2.0);
  k.cx = static_cast<double>(w) / 2.0;
  k.cy = static_cast<double>(h) / 2.0;
  return k;
}

std::size_t Pointmap::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

ConfidenceMap::ConfidenceMap(std::size_t h, std::size_t w, double fill)
    : height_(h), width_(w), raw_(h * w, std::clamp(fill, -kConfidenceClamp, kConfidenceClamp)) {}

ConfidenceMap::ConfidenceMap(std::size_t h, std::size_t w, std::vector<double> raw)
    : height_(h), width_(w), raw_(std::move(raw)) {
  if (raw_.size() != h * w) throw Error(ErrorKind::Shape, "confidence map size mismatch");
  for (double& v : raw_) {
    if (!std::isfinite(v)) throw Error(ErrorKind::Shape, "non-finite confidence");
    v = std::clamp(v, -kConfidenceClamp, kConfidenceClamp);
  }
}

void ConfidenceMap::set_raw(std::size_t i, double value) {
  raw_.at(i) = std::clamp(value, -kConfidenceClamp, kConfidenceClamp);
}

double ConfidenceMap::positive(std::size_t i) const { return 1.0 + std::exp(raw_[i]); }

Pointmap transform_pointmap(const Pointmap& pm, const SimilarityTransform& t) {
  Pointmap out = pm;
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (pm.valid[i]) out.points[i] = t.apply(pm.points[i]);
  }
  return out;
}

Pixel project(const Vec3& p, const CameraIntrinsics& k) {
  if (p.z() <= 1e-12) throw Error(ErrorKind::NonPositiveDepth, "point behind camera");
  return {k.focal * p.x() / p.z() + k.cx, k.focal * p.y() / p.z() + k.cy};
}

Vec3 unproject(double u, double v, double depth, const CameraIntrinsics& k) {
  if (depth <= 1e-12) throw Error(ErrorKind::NonPositiveDepth, "depth must be positive");
  return {(u - k.cx) / k.focal * depth, (v - k.cy) / k.focal * depth, depth};
}

double rotation_angle_deg(const RotationMatrix& a, const RotationMatrix& b) {
  const Mat3 r = a.transpose() * b;
  const double c = (r.trace() - 1.0) / 2.0;
  const double s = 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)).norm();
  return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

double translation_angle_deg(const Vec3& a, const Vec3& b) {
  const double na = a.norm();
  const double nb = b.norm();
  const bool za = na < 1e-8;
  const bool zb = nb < 1e-8;
  if (za && zb) return 0.0;
  if (za != zb) return 180.0;
  return std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / std::numbers::pi;
}

}  // namespace f3r
