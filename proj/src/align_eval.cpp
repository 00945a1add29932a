#include "f3r/align_eval.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "f3r/error.hpp"
#include "f3r/kdtree.hpp"
#include "f3r/parallel.hpp"

namespace f3r {

SimilarityTransform weighted_umeyama(std::span<const Vec3> src, std::span<const Vec3> dst,
                                     std::span<const double> weights, bool with_scale) {
  if (src.size() != dst.size() || src.size() != weights.size()) {
    throw Error(ErrorKind::Shape, "umeyama inputs differ in size");
  }
  double total = 0.0;
  std::size_t used = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorKind::Shape, "umeyama weights must be finite and >= 0");
    total += w;
    used += w > 0.0 ? 1 : 0;
  }
  if (used < 3 || total <= 0.0) throw Error(ErrorKind::DegenerateConfiguration, "fewer than 3 weighted points");

  Vec3 mu_s = Vec3::Zero();
  Vec3 mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    mu_s += weights[i] * src[i];
    mu_d += weights[i] * dst[i];
  }
  mu_s /= total;
  mu_d /= total;

  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 s = src[i] - mu_s;
    const Vec3 d = dst[i] - mu_d;
    cov += weights[i] * d * s.transpose();
    var_s += weights[i] * s.squaredNorm();
  }
  cov /= total;
  var_s /= total;

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0]) {
    throw Error(ErrorKind::DegenerateConfiguration, "rank-deficient cross-covariance");
  }
  Vec3 s = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s[2] = -1.0;

  SimilarityTransform out;
  out.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  out.scale = with_scale ? sv.dot(s) / var_s : 1.0;
  out.translation = mu_d - out.scale * (out.rotation * mu_s);
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorKind::EmptyCloud, "median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

namespace {

struct ViewAlignment {
  std::optional<SimilarityTransform> transform;
  double rms = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

ViewAlignment align_view(const PredictionBundle& bundle, std::size_t v, const AlignOptions& opt) {
  const Pointmap& local = bundle.local[v];
  const Pointmap& global = bundle.global[v];
  if (local.size() != global.size()) throw Error(ErrorKind::Shape, "local and global grids differ");
  std::vector<std::size_t> pixels;
  for (std::size_t i = 0; i < local.size(); ++i)
    if (local.valid[i] && global.valid[i]) pixels.push_back(i);

  std::vector<Vec3> src, dst;
  std::vector<double> w;
  for (std::size_t i : pixels) {
    src.push_back(local.points[i]);
    dst.push_back(global.points[i]);
    w.push_back(opt.conf_weighting ? bundle.local_conf[v].positive(i) : 1.0);
  }

  ViewAlignment out;
  try {
    SimilarityTransform t = weighted_umeyama(src, dst, w, opt.with_scale);
    for (int round = 0; round < opt.trim_rounds; ++round) {
      std::vector<double> res(src.size());
      for (std::size_t k = 0; k < src.size(); ++k) res[k] = (t.apply(src[k]) - dst[k]).norm();
      const double cut = std::max(opt.trim_factor * median(res), 1e-9);
      std::vector<double> trimmed = w;
      bool changed = false;
      std::size_t kept = 0;
      for (std::size_t k = 0; k < res.size(); ++k) {
        if (res[k] > cut && trimmed[k] > 0.0) {
          trimmed[k] = 0.0;
          changed = true;
        }
        kept += trimmed[k] > 0.0 ? 1 : 0;
      }
      if (!changed || kept < 3) break;
      t = weighted_umeyama(src, dst, trimmed, opt.with_scale);
    }
    double ss = 0.0;
    for (std::size_t k = 0; k < src.size(); ++k) ss += (t.apply(src[k]) - dst[k]).squaredNorm();
    out.rms = std::sqrt(ss / static_cast<double>(src.size()));
    out.transform = t;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateConfiguration) throw;
    out.error = e.what();
  }
  return out;
}

}  // namespace

std::pair<MergedCloud, AlignmentResult> align_local_to_global(const PredictionBundle& bundle,
                                                              const AlignOptions& options) {
  const std::size_t n = bundle.view_count();
  if (bundle.global.size() != n || bundle.local_conf.size() != n) {
    throw Error(ErrorKind::Shape, "prediction bundle fields differ in view count");
  }
  std::vector<ViewAlignment> views(n);
  parallel_for(n, options.jobs, [&](std::size_t v) { views[v] = align_view(bundle, v, options); });

  MergedCloud cloud;
  AlignmentResult result;
  for (std::size_t v = 0; v < n; ++v) {
    result.transforms.push_back(views[v].transform);
    result.residual_rms.push_back(views[v].rms);
    result.errors.push_back(views[v].error);
    if (!views[v].transform) continue;
    const Pointmap& local = bundle.local[v];
    for (std::size_t i = 0; i < local.size(); ++i) {
      if (!local.valid[i] || !bundle.global[v].valid[i]) continue;
      cloud.points.push_back(views[v].transform->apply(local.points[i]));
      cloud.view.push_back(v);
      cloud.pixel.push_back(i);
    }
  }
  return {std::move(cloud), std::move(result)};
}

MergedCloud global_cloud(const PredictionBundle& bundle) {
  MergedCloud cloud;
  for (std::size_t v = 0; v < bundle.global.size(); ++v) {
    const Pointmap& g = bundle.global[v];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g.valid[i]) continue;
      cloud.points.push_back(g.points[i]);
      cloud.view.push_back(v);
      cloud.pixel.push_back(i);
    }
  }
  return cloud;
}

std::vector<PairError> pairwise_pose_errors(std::span<const CameraModel> pred, std::span<const CameraModel> gt) {
  if (pred.size() != gt.size()) throw Error(ErrorKind::Schema, "predicted and ground-truth camera counts differ");
  if (pred.size() < 2) throw Error(ErrorKind::TooFewViews, "pose metrics need at least 2 views");
  // Relative world-to-camera motion from camera i to camera j.
  auto relative = [](const CameraModel& a, const CameraModel& b) {
    const RigidTransform wa = invert(a.pose);
    const RigidTransform wb = invert(b.pose);
    return compose(wb, invert(wa));
  };
  std::vector<PairError> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      const RigidTransform p = relative(pred[i], pred[j]);
      const RigidTransform g = relative(gt[i], gt[j]);
      out.push_back({rotation_angle_deg(p.rotation, g.rotation), translation_angle_deg(p.translation, g.translation)});
    }
  }
  return out;
}

PoseMetrics pose_metrics(std::span<const CameraModel> pred, std::span<const CameraModel> gt,
                         std::span<const double> thresholds) {
  return pose_metrics_from_errors(pairwise_pose_errors(pred, gt), thresholds);
}

PoseMetrics pose_metrics_from_errors(std::span<const PairError> errors, std::span<const double> thresholds) {
  if (errors.empty()) throw Error(ErrorKind::TooFewViews, "no view pairs to score");
  const double pairs = static_cast<double>(errors.size());
  PoseMetrics m;
  for (double tau : thresholds) {
    std::size_t r = 0, t = 0;
    for (const auto& e : errors) {
      r += e.rotation_deg < tau ? 1 : 0;
      t += e.translation_deg < tau ? 1 : 0;
    }
    m.rra_at[tau] = static_cast<double>(r) / pairs;
    m.rta_at[tau] = static_cast<double>(t) / pairs;
  }
  double acc = 0.0;
  for (int tau = 1; tau <= 30; ++tau) {
    std::size_t ok = 0;
    for (const auto& e : errors) ok += std::max(e.rotation_deg, e.translation_deg) < tau ? 1 : 0;
    acc += static_cast<double>(ok) / pairs;
  }
  m.maa30 = acc / 30.0;
  return m;
}

ReconstructionMetrics reconstruction_metrics(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.empty() || gt.empty()) throw Error(ErrorKind::EmptyCloud, "reconstruction metrics need non-empty clouds");
  auto directed = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    const KdTree tree(to);
    std::vector<double> d(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) d[i] = std::sqrt(tree.nearest(from[i]).squared_distance);
    return median(std::move(d));
  };
  return {directed(pred, gt), directed(gt, pred)};
}

DepthMetrics depth_metrics(std::span<const Pointmap> pred, std::span<const Pointmap> gt,
                           std::span<const std::vector<std::uint8_t>> masks) {
  if (pred.size() != gt.size() || pred.size() != masks.size()) throw Error(ErrorKind::Shape, "depth inputs differ in views");
  double rel = 0.0;
  std::size_t inliers = 0, n = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (pred[v].size() != gt[v].size() || masks[v].size() != gt[v].size()) {
      throw Error(ErrorKind::Shape, "depth grids differ");
    }
    for (std::size_t i = 0; i < gt[v].size(); ++i) {
      if (!masks[v][i]) continue;
      const double d = pred[v].points[i].z();
      const double ref = gt[v].points[i].z();
      if (!(ref > 0.0)) throw Error(ErrorKind::NonPositiveGtDepth, "ground-truth depth must be positive");
      rel += std::abs(d - ref) / ref;
      if (d > 0.0 && std::max(d / ref, ref / d) < 1.03) ++inliers;
      ++n;
    }
  }
  if (n == 0) throw Error(ErrorKind::EmptyMask, "no valid pixels for depth metrics");
  return {100.0 * rel / static_cast<double>(n), 100.0 * static_cast<double>(inliers) / static_cast<double>(n)};
}

void MetricReport::add(const std::string& name, double value) { entries_.emplace_back(name, value); }

std::optional<double> MetricReport::find(const std::string& name) const {
  for (const auto& [k, v] : entries_)
    if (k == name) return v;
  return std::nullopt;
}

void MetricReport::write(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path);
  char buf[64];
  for (const auto& [k, v] : entries_) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << "metric=" << k << " value=" << buf << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path);
}

MetricReport MetricReport::read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  MetricReport r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(" value=");
    if (line.rfind("metric=", 0) != 0 || sp == std::string::npos) {
      throw Error(ErrorKind::Format, "bad metrics line: " + line);
    }
    r.add(line.substr(7, sp - 7), std::stod(line.substr(sp + 7)));
  }
  return r;
}

std::string MetricReport::table() const {
  std::size_t width = 6;
  for (const auto& e : entries_) width = std::max(width, e.first.size());
  std::ostringstream os;
  char buf[64];
  for (const auto& [k, v] : entries_) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    os << k << std::string(width - k.size() + 2, ' ') << buf << '\n';
  }
  return os.str();
}

}  // namespace f3r
