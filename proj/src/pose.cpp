#include "f3r/pose.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "f3r/align_eval.hpp"
#include "f3r/parallel.hpp"

namespace f3r {

void RansacConfig::validate() const {
  if (iterations < 1) throw Error(ErrorKind::Config, "ransac iterations must be >= 1");
  if (!(threshold_px > 0.0)) throw Error(ErrorKind::Config, "inlier threshold must be > 0");
  if (!(confidence_fraction > 0.0 && confidence_fraction <= 1.0)) {
    throw Error(ErrorKind::Config, "confidence_fraction must lie in (0, 1]");
  }
  if (focal_candidate_count < 1) throw Error(ErrorKind::Config, "focal_candidate_count must be >= 1");
}

std::vector<std::uint8_t> confidence_top_fraction(const ConfidenceMap& conf, std::span<const std::uint8_t> mask,
                                                  double fraction) {
  if (mask.size() != conf.size()) throw Error(ErrorKind::Shape, "mask size differs from confidence map");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::Config, "fraction must lie in (0, 1]");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) order.push_back(i);
  const double exact = fraction * static_cast<double>(order.size());
  const auto keep = std::max<std::size_t>(static_cast<std::size_t>(std::ceil(exact - 1e-9)), 3);
  if (keep > order.size()) throw Error(ErrorKind::TooFewPoints, "fewer than 3 valid pixels after filtering");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf.raw(a) > conf.raw(b); });
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = 1;
  return out;
}

std::vector<double> focal_candidates(std::size_t h, std::size_t w, std::size_t count) {
  (void)h;
  if (count < 1) throw Error(ErrorKind::Config, "focal candidate count must be >= 1");
  constexpr double lo = 25.0, hi = 120.0;
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double fov = count == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    out.push_back(0.5 * static_cast<double>(w) / std::tan(0.5 * fov * std::numbers::pi / 180.0));
  }
  return out;
}

namespace {

using Poly = std::vector<double>;  // coefficients, lowest degree first

Poly mul(const Poly& a, const Poly& b) {
  Poly out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

Poly add(Poly a, const Poly& b, double scale = 1.0) {
  if (a.size() < b.size()) a.resize(b.size(), 0.0);
  for (std::size_t i = 0; i < b.size(); ++i) a[i] += scale * b[i];
  return a;
}

double eval(const Poly& p, double x) {
  double r = 0.0;
  for (std::size_t i = p.size(); i-- > 0;) r = r * x + p[i];
  return r;
}

std::vector<double> real_roots(Poly p) {
  double big = 0.0;
  for (double c : p) big = std::max(big, std::abs(c));
  if (big == 0.0) return {};
  while (p.size() > 1 && std::abs(p.back()) <= 1e-14 * big) p.pop_back();
  const std::size_t deg = p.size() - 1;
  if (deg == 0) return {};
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(deg), static_cast<Eigen::Index>(deg));
  for (std::size_t i = 0; i < deg; ++i) {
    companion(0, static_cast<Eigen::Index>(i)) = -p[deg - 1 - i] / p[deg];
    if (i + 1 < deg) companion(static_cast<Eigen::Index>(i + 1), static_cast<Eigen::Index>(i)) = 1.0;
  }
  Eigen::EigenSolver<Eigen::MatrixXd> es(companion, false);
  Poly dp;
  for (std::size_t i = 1; i < p.size(); ++i) dp.push_back(static_cast<double>(i) * p[i]);
  std::vector<double> roots;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const auto z = es.eigenvalues()[i];
    if (std::abs(z.imag()) > 1e-6 * (1.0 + std::abs(z.real()))) continue;
    double x = z.real();
    for (int it = 0; it < 8; ++it) {
      const double d = eval(dp, x);
      if (d == 0.0) break;
      const double step = eval(p, x) / d;
      x -= step;
      if (std::abs(step) <= 1e-16 * (1.0 + std::abs(x))) break;
    }
    roots.push_back(x);
  }
  return roots;
}

Vec3 bearing(const Pixel& p, const CameraIntrinsics& k) {
  return Vec3((p.u - k.cx) / k.focal, (p.v - k.cy) / k.focal, 1.0).normalized();
}

// Newton polish of the three distance equations in the depths along the rays.
void polish_depths(Vec3& s, double ca, double cb, double cg, double a2, double b2, double c2) {
  for (int it = 0; it < 4; ++it) {
    const Vec3 f(s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2,
                 s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2,
                 s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2);
    Mat3 j;
    j << 0, 2 * s[1] - 2 * s[2] * ca, 2 * s[2] - 2 * s[1] * ca,  //
        2 * s[0] - 2 * s[2] * cb, 0, 2 * s[2] - 2 * s[0] * cb,   //
        2 * s[0] - 2 * s[1] * cg, 2 * s[1] - 2 * s[0] * cg, 0;
    const Vec3 step = j.fullPivLu().solve(f);
    if (!step.allFinite()) return;
    s -= step;
  }
}

double reprojection_error(const RigidTransform& w2c, const CameraIntrinsics& k, const Vec3& x, const Pixel& px) {
  const Vec3 c = w2c.apply(x);
  if (c.z() <= 1e-12) return std::numeric_limits<double>::infinity();
  return std::hypot(k.focal * c.x() / c.z() + k.cx - px.u, k.focal * c.y() / c.z() + k.cy - px.v);
}

}  // namespace

std::vector<RigidTransform> solve_p3p(std::span<const Vec3> pts3d, std::span<const Pixel> px,
                                      const CameraIntrinsics& k) {
  if (pts3d.size() != 3 || px.size() != 3) throw Error(ErrorKind::Shape, "p3p needs exactly 3 correspondences");
  const Vec3& p1 = pts3d[0];
  const Vec3& p2 = pts3d[1];
  const Vec3& p3 = pts3d[2];
  const double span = std::max((p2 - p1).squaredNorm(), (p3 - p1).squaredNorm());
  if (span <= 0.0 || (p2 - p1).cross(p3 - p1).norm() <= 1e-10 * span) {
    throw Error(ErrorKind::DegenerateConfiguration, "p3p points are collinear or coincident");
  }
  const Vec3 j1 = bearing(px[0], k), j2 = bearing(px[1], k), j3 = bearing(px[2], k);
  const double ca = j2.dot(j3), cb = j1.dot(j3), cg = j1.dot(j2);
  const double a2 = (p2 - p3).squaredNorm(), b2 = (p1 - p3).squaredNorm(), c2 = (p1 - p2).squaredNorm();

  // With s2 = u s1 and s3 = v s1, eliminating u leaves a quartic in v.
  const Poly n = {c2 - a2 - b2, -2.0 * (c2 - a2) * cb, b2 + c2 - a2};
  const Poly d = {-2.0 * b2 * cg, 2.0 * b2 * ca};
  const Poly q = {1.0, -2.0 * cb, 1.0};
  const Poly dd = mul(d, d);
  Poly f = add(add(dd, mul(n, n)), mul(n, d), -2.0 * cg);
  for (double& c : f) c *= b2;
  f = add(f, mul(q, dd), -c2);

  std::vector<RigidTransform> out;
  for (double v : real_roots(f)) {
    if (!(v > 0.0)) continue;
    const double dv = eval(d, v);
    const double qv = eval(q, v);
    if (std::abs(dv) < 1e-14 || !(qv > 0.0)) continue;
    const double u = eval(n, v) / dv;
    if (!(u > 0.0)) continue;
    const double s1 = std::sqrt(b2 / qv);
    Vec3 s(s1, u * s1, v * s1);
    polish_depths(s, ca, cb, cg, a2, b2, c2);
    if (!(s.minCoeff() > 0.0) || !s.allFinite()) continue;
    const std::array<Vec3, 3> cam = {s[0] * j1, s[1] * j2, s[2] * j3};
    const std::array<double, 3> w = {1.0, 1.0, 1.0};
    SimilarityTransform sim;
    try {
      sim = weighted_umeyama(pts3d, cam, w, false);
    } catch (const Error&) {
      continue;
    }
    const RigidTransform w2c{sim.rotation, sim.translation};
    bool ok = true;
    for (std::size_t i = 0; i < 3 && ok; ++i) ok = reprojection_error(w2c, k, pts3d[i], px[i]) < 1e-6;
    if (!ok) continue;
    const RigidTransform c2w = invert(w2c);
    const bool duplicate = std::any_of(out.begin(), out.end(), [&](const RigidTransform& o) {
      return (o.rotation - c2w.rotation).norm() < 1e-9 && (o.translation - c2w.translation).norm() < 1e-9;
    });
    if (!duplicate && out.size() < 4) out.push_back(c2w);
  }
  return out;
}

namespace {

struct Hypothesis {
  RigidTransform w2c;
  CameraIntrinsics k;
  std::vector<std::size_t> inliers;
};

std::vector<std::size_t> inliers_of(const RigidTransform& w2c, const CameraIntrinsics& k, std::span<const Vec3> pts,
                                    std::span<const Pixel> px, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (reprojection_error(w2c, k, pts[i], px[i]) < threshold) out.push_back(i);
  return out;
}

double cost_of(const RigidTransform& w2c, const CameraIntrinsics& k, std::span<const Vec3> pts,
               std::span<const Pixel> px, std::span<const std::size_t> idx) {
  double s = 0.0;
  for (std::size_t i : idx) {
    const double e = reprojection_error(w2c, k, pts[i], px[i]);
    s += e * e;
  }
  return s;
}

// Levenberg-damped Gauss-Newton on the squared reprojection error.
void refine(Hypothesis& h, std::span<const Vec3> pts, std::span<const Pixel> px, std::size_t iterations,
            bool refine_focal) {
  const int dim = refine_focal ? 7 : 6;
  double lambda = 1e-6;
  double cost = cost_of(h.w2c, h.k, pts, px, h.inliers);
  for (std::size_t it = 0; it < iterations; ++it) {
    Eigen::MatrixXd jtj = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd jtr = Eigen::VectorXd::Zero(dim);
    for (std::size_t i : h.inliers) {
      const Vec3 rx = h.w2c.rotation * pts[i];
      const Vec3 c = rx + h.w2c.translation;
      if (c.z() <= 1e-12) continue;
      const double iz = 1.0 / c.z();
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << h.k.focal * iz, 0.0, -h.k.focal * c.x() * iz * iz, 0.0, h.k.focal * iz, -h.k.focal * c.y() * iz * iz;
      Mat3 skew;
      skew << 0.0, -rx.z(), rx.y(), rx.z(), 0.0, -rx.x(), -rx.y(), rx.x(), 0.0;
      Eigen::Matrix<double, 2, Eigen::Dynamic> j(2, dim);
      j.leftCols<3>() = -dproj * skew;
      j.middleCols<3>(3) = dproj;
      if (refine_focal) j.col(6) << c.x() * iz, c.y() * iz;
      const Eigen::Vector2d r(h.k.focal * c.x() * iz + h.k.cx - px[i].u, h.k.focal * c.y() * iz + h.k.cy - px[i].v);
      jtj += j.transpose() * j;
      jtr += j.transpose() * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 8 && !improved; ++attempt) {
      Eigen::MatrixXd a = jtj;
      a.diagonal() += lambda * (jtj.diagonal().array() + 1e-12).matrix();
      const Eigen::VectorXd step = -a.ldlt().solve(jtr);
      if (!step.allFinite()) break;
      Hypothesis next = h;
      const Vec3 w = step.head<3>();
      const double angle = w.norm();
      const Mat3 dr = angle > 0.0 ? Mat3(Eigen::AngleAxisd(angle, w / angle)) : Mat3::Identity();
      next.w2c.rotation = orthonormalize(dr * h.w2c.rotation);
      next.w2c.translation = h.w2c.translation + step.segment<3>(3);
      if (refine_focal) next.k.focal = h.k.focal + step[6];
      if (!(next.k.focal > 0.0)) {
        lambda *= 10.0;
        continue;
      }
      const double c = cost_of(next.w2c, next.k, pts, px, h.inliers);
      if (c <= cost) {
        h.w2c = next.w2c;
        h.k = next.k;
        cost = c;
        lambda = std::max(lambda * 0.1, 1e-12);
        improved = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
}

}  // namespace

PoseEstimate ransac_pnp(std::span<const Vec3> pts3d, std::span<const Pixel> px, const CameraIntrinsics& k,
                        const RansacConfig& cfg, bool refine_focal) {
  cfg.validate();
  if (pts3d.size() != px.size()) throw Error(ErrorKind::Shape, "correspondence lists differ in size");
  const std::size_t n = pts3d.size();
  if (n < 4) throw Error(ErrorKind::TooFewPoints, "ransac-pnp needs at least 4 correspondences");
  if (std::all_of(pts3d.begin(), pts3d.end(), [&](const Vec3& p) { return p == pts3d[0]; })) {
    throw Error(ErrorKind::DegenerateConfiguration, "all 3-D points coincide");
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::optional<Hypothesis> best;
  std::array<Vec3, 3> sp;
  std::array<Pixel, 3> sx;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::array<std::size_t, 3> idx{};
    idx[0] = pick(rng);
    do idx[1] = pick(rng);
    while (idx[1] == idx[0]);
    do idx[2] = pick(rng);
    while (idx[2] == idx[0] || idx[2] == idx[1]);
    for (int j = 0; j < 3; ++j) {
      sp[static_cast<std::size_t>(j)] = pts3d[idx[static_cast<std::size_t>(j)]];
      sx[static_cast<std::size_t>(j)] = px[idx[static_cast<std::size_t>(j)]];
    }
    std::vector<RigidTransform> sols;
    try {
      sols = solve_p3p(sp, sx, k);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateConfiguration) throw;
      continue;
    }
    for (const auto& c2w : sols) {
      const RigidTransform w2c = invert(c2w);
      auto in = inliers_of(w2c, k, pts3d, px, cfg.threshold_px);
      if (!best || in.size() > best->inliers.size()) best = Hypothesis{w2c, k, std::move(in)};
    }
  }
  if (!best || best->inliers.size() < cfg.min_inliers) {
    throw Error(ErrorKind::NoConsensus, "best hypothesis has fewer than " + std::to_string(cfg.min_inliers) + " inliers");
  }

  Hypothesis refined = *best;
  refine(refined, pts3d, px, cfg.refine_iterations, refine_focal);
  refined.inliers = inliers_of(refined.w2c, refined.k, pts3d, px, cfg.threshold_px);
  const Hypothesis& chosen = refined.inliers.size() >= best->inliers.size() ? refined : *best;

  PoseEstimate out;
  out.camera.intrinsics = chosen.k;
  out.camera.pose = invert(chosen.w2c);
  out.inliers = chosen.inliers;
  out.inlier_count = chosen.inliers.size();
  out.outlier_count = n - out.inlier_count;
  out.focal_score = static_cast<double>(out.outlier_count);
  return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::optional<std::size_t> pick_focal_candidate(std::span<const std::optional<std::size_t>> outliers) {
  const double mid = 0.5 * static_cast<double>(outliers.size()) - 0.5;
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < outliers.size(); ++c) {
    if (!outliers[c]) continue;
    if (!best) {
      best = c;
      continue;
    }
    const double da = std::abs(static_cast<double>(c) - mid);
    const double db = std::abs(static_cast<double>(*best) - mid);
    if (*outliers[c] < *outliers[*best] || (*outliers[c] == *outliers[*best] && da < db)) best = c;
  }
  return best;
}

PoseEstimate estimate_camera(const Pointmap& global, const ConfidenceMap& conf, std::span<const std::uint8_t> mask,
                             const RansacConfig& cfg, std::optional<double> fixed_focal) {
  cfg.validate();
  if (mask.size() != global.size() || conf.size() != global.size()) {
    throw Error(ErrorKind::Shape, "pointmap, confidence and mask sizes differ");
  }
  std::vector<std::uint8_t> usable(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) usable[i] = mask[i] && global.valid[i];
  const auto selected = confidence_top_fraction(conf, usable, cfg.confidence_fraction);

  std::vector<Vec3> pts;
  std::vector<Pixel> px;
  std::vector<std::size_t> pixel_of;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (!selected[i]) continue;
    pts.push_back(global.points[i]);
    px.push_back({static_cast<double>(i % global.width) + 0.5, static_cast<double>(i / global.width) + 0.5});
    pixel_of.push_back(i);
  }
  const double cx = 0.5 * static_cast<double>(global.width);
  const double cy = 0.5 * static_cast<double>(global.height);

  auto to_pixels = [&](PoseEstimate e) {
    for (auto& i : e.inliers) i = pixel_of[i];
    return e;
  };

  if (fixed_focal) {
    return to_pixels(ransac_pnp(pts, px, {*fixed_focal, cx, cy}, cfg, false));
  }

  const auto focals = focal_candidates(global.height, global.width, cfg.focal_candidate_count);
  std::vector<std::optional<PoseEstimate>> runs(focals.size());
  std::vector<std::optional<Error>> failures(focals.size());
  RansacConfig inner = cfg;
  inner.jobs = 1;
  parallel_for(focals.size(), cfg.jobs, [&](std::size_t c) {
    RansacConfig local = inner;
    local.seed = mix_seed(cfg.seed, c);
    try {
      runs[c] = ransac_pnp(pts, px, {focals[c], cx, cy}, local, true);
    } catch (const Error& e) {
      failures[c] = e;
    }
  });

  std::vector<std::optional<std::size_t>> outliers(focals.size());
  for (std::size_t c = 0; c < focals.size(); ++c)
    if (runs[c]) outliers[c] = runs[c]->outlier_count;
  const std::optional<std::size_t> best = pick_focal_candidate(outliers);
  if (!best) {
    for (auto& f : failures)
      if (f && f->kind() != ErrorKind::NoConsensus) throw *f;
    throw Error(ErrorKind::NoConsensus, "no focal candidate reached consensus");
  }
  return to_pixels(std::move(*runs[*best]));
}

std::vector<ViewPose> estimate_all_cameras(const PredictionBundle& bundle, const RansacConfig& cfg,
                                           bool shared_camera) {
  cfg.validate();
  const std::size_t n = bundle.global.size();
  if (n == 0) throw Error(ErrorKind::TooFewViews, "no views to estimate");
  if (bundle.global_conf.size() != n) throw Error(ErrorKind::Shape, "global confidences differ in view count");

  std::vector<ViewPose> out(n);
  auto run = [&](std::size_t v, std::optional<double> focal, std::size_t jobs) {
    RansacConfig local = cfg;
    local.seed = mix_seed(cfg.seed, 1000 + v);
    local.jobs = jobs;
    try {
      out[v].estimate = estimate_camera(bundle.global[v], bundle.global_conf[v], bundle.global[v].valid, local, focal);
    } catch (const Error& e) {
      out[v].error = e.kind();
      out[v].message = e.what();
    }
  };

  std::size_t first = 0;
  std::optional<double> focal;
  if (shared_camera) {
    run(0, std::nullopt, cfg.jobs);
    if (out[0].estimate) focal = out[0].estimate->camera.intrinsics.focal;
    first = 1;
  }
  parallel_for(n - first, cfg.jobs, [&](std::size_t i) { run(first + i, focal, 1); });
  return out;
}

void write_pose_file(const std::string& path, std::span<const ViewPose> poses) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path);
  out << "# camera-to-world: x_world = R * x_camera + t\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (std::size_t v = 0; v < poses.size(); ++v) {
    out << "view=" << v;
    if (!poses[v].estimate) {
      out << " error=" << error_kind_name(poses[v].error.value_or(ErrorKind::NoConsensus)) << '\n';
      continue;
    }
    const auto& e = *poses[v].estimate;
    const auto& k = e.camera.intrinsics;
    out << " f=" << num(k.focal) << " cx=" << num(k.cx) << " cy=" << num(k.cy) << " R=";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out << (r + c ? "," : "") << num(e.camera.pose.rotation(r, c));
    out << " t=" << num(e.camera.pose.translation.x()) << ',' << num(e.camera.pose.translation.y()) << ','
        << num(e.camera.pose.translation.z()) << " inliers=" << e.inlier_count << " outliers=" << e.outlier_count
        << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path);
}

}  // namespace f3r
