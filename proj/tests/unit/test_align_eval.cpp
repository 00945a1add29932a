#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "f3r/align_eval.hpp"
#include "f3r/error.hpp"
#include "f3r/kdtree.hpp"
#include "test_util.hpp"

using namespace f3r;
using f3r::testing::bundle_from;
using f3r::testing::random_rigid;
using f3r::testing::random_rotation;
using f3r::testing::random_vec;

namespace {

std::vector<Vec3> random_cloud(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) pts.push_back(random_vec(rng, scale));
  return pts;
}

std::vector<CameraModel> random_cameras(std::mt19937_64& rng, std::size_t n) {
  std::vector<CameraModel> cams(n);
  for (auto& c : cams) c.pose = random_rigid(rng, 2.0);
  return cams;
}

// Independent pairwise errors: angle-axis for rotations, normalized dot for
// translation directions.
std::vector<PairError> brute_force_errors(const std::vector<CameraModel>& pred, const std::vector<CameraModel>& gt) {
  std::vector<PairError> out;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      auto rel = [&](const std::vector<CameraModel>& c) {
        auto homogeneous = [](const RigidTransform& t) {
          Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
          m.topLeftCorner<3, 3>() = t.rotation;
          m.topRightCorner<3, 1>() = t.translation;
          return m;
        };
        return Eigen::Matrix4d(homogeneous(c[j].pose).inverse() * homogeneous(c[i].pose));
      };
      const auto rp = rel(pred);
      const auto rg = rel(gt);
      const Mat3 dr = rp.topLeftCorner<3, 3>().transpose() * rg.topLeftCorner<3, 3>();
      const double rot = Eigen::AngleAxisd(dr).angle() * 180.0 / std::numbers::pi;
      const double c = Vec3(rp.topRightCorner<3, 1>()).normalized().dot(Vec3(rg.topRightCorner<3, 1>()).normalized());
      out.push_back({rot, std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi});
    }
  return out;
}

double brute_force_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> brute_force_nn(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  std::vector<double> d;
  for (const auto& q : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : to) best = std::min(best, (p - q).squaredNorm());
    d.push_back(std::sqrt(best));
  }
  return d;
}

}  // namespace

TEST_CASE("umeyama examples") {
  std::mt19937_64 rng(1);
  const auto src = random_cloud(rng, 20);
  const std::vector<double> w(20, 1.0);
  const SimilarityTransform id = weighted_umeyama(src, src, w, true);
  CHECK(id.scale == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((id.rotation - Mat3::Identity()).norm() < 1e-12);
  CHECK(id.translation.norm() < 1e-12);

  std::vector<Vec3> dst;
  for (const auto& p : src) dst.push_back(2.0 * (rot_z(30.0) * p) + Vec3(1, 0, 0));
  const SimilarityTransform t = weighted_umeyama(src, dst, w, true);
  CHECK(std::abs(t.scale - 2.0) < 1e-9);
  CHECK((t.rotation - rot_z(30.0)).norm() < 1e-9);
  CHECK((t.translation - Vec3(1, 0, 0)).norm() < 1e-9);

  for (int trial = 0; trial < 20; ++trial) {
    const RigidTransform r = random_rigid(rng);
    std::vector<Vec3> moved;
    for (const auto& p : src) moved.push_back(r.apply(p));
    const SimilarityTransform rigid = weighted_umeyama(src, moved, w, false);
    CHECK(rigid.scale == 1.0);
    CHECK((rigid.rotation - r.rotation).norm() < 1e-9);
  }
}

TEST_CASE("umeyama never returns a reflection") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> src, dst;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 12; ++i) {
      const Vec3 p(u(rng), u(rng), 0.0);
      src.push_back(p);
      dst.push_back(Vec3(-p.x(), p.y(), 0.0));  // mirror image; naive SVD picks det = -1
    }
    const std::vector<double> w(12, 1.0);
    const SimilarityTransform t = weighted_umeyama(src, dst, w, false);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(is_rotation(t.rotation, 1e-9));
  }
}

TEST_CASE("umeyama errors") {
  const std::vector<Vec3> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  const std::vector<double> w(4, 1.0);
  CHECK_THROWS_WITH_AS(weighted_umeyama(line, line, w, false), doctest::Contains("DegenerateConfiguration"), Error);
  const std::vector<Vec3> tri{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const std::vector<double> sparse{1.0, 1.0, 0.0, 0.0};
  CHECK_THROWS_WITH_AS(weighted_umeyama(tri, tri, sparse, false), doctest::Contains("DegenerateConfiguration"), Error);
  const std::vector<double> negative{1.0, 1.0, -1.0, 1.0};
  CHECK_THROWS_AS(weighted_umeyama(tri, tri, negative, false), Error);
  const std::vector<double> short_w{1.0, 1.0};
  CHECK_THROWS_AS(weighted_umeyama(tri, tri, short_w, false), Error);
}

TEST_CASE("alignment of exact bundles") {
  RenderSettings rs;
  rs.views = 5;
  const GroundTruthSample gt = generate_sample(rs, 11);
  const PredictionBundle b = bundle_from(gt);
  const auto [merged, result] = align_local_to_global(b);
  REQUIRE(result.transforms.size() == 5);
  for (std::size_t v = 0; v < 5; ++v) {
    REQUIRE(result.transforms[v].has_value());
    CHECK(result.residual_rms[v] < 1e-9);
    CHECK(result.errors[v].empty());
  }
  const auto& first = *result.transforms[0];
  CHECK((first.rotation - Mat3::Identity()).norm() < 1e-9);
  CHECK(first.translation.norm() < 1e-9);
  const MergedCloud reference = global_cloud(b);
  REQUIRE(merged.points.size() == reference.points.size());
  CHECK(merged.view == reference.view);
  CHECK(merged.pixel == reference.pixel);
  double worst = 0.0;
  for (std::size_t i = 0; i < merged.points.size(); ++i)
    worst = std::max(worst, (merged.points[i] - reference.points[i]).norm());
  CHECK(worst < 1e-9);

  AlignOptions parallel;
  parallel.jobs = 3;
  const auto again = align_local_to_global(b, parallel);
  CHECK(again.first.points == merged.points);
}

TEST_CASE("alignment skips degenerate views") {
  RenderSettings rs;
  rs.views = 3;
  PredictionBundle b = bundle_from(generate_sample(rs, 12));
  auto& valid = b.local[1].valid;
  std::size_t kept = 0;
  for (auto& m : valid) {
    if (m && kept < 2) {
      ++kept;
      continue;
    }
    m = 0;
  }
  const auto [merged, result] = align_local_to_global(b);
  CHECK_FALSE(result.transforms[1].has_value());
  CHECK(std::isnan(result.residual_rms[1]));
  CHECK(result.errors[1].find("DegenerateConfiguration") != std::string::npos);
  CHECK(result.transforms[0].has_value());
  CHECK(result.transforms[2].has_value());
  for (std::size_t v : merged.view) CHECK(v != 1);
}

TEST_CASE("confidence weighting discounts a corrupted region") {
  RenderSettings rs;
  rs.views = 3;
  const GroundTruthSample gt = generate_sample(rs, 13);
  PredictionBundle b = bundle_from(gt, 5.0);
  const std::size_t v = 1;
  std::vector<std::uint8_t> corrupted(b.local[v].size(), 0);
  std::size_t seen = 0;
  for (std::size_t i = 0; i < b.local[v].size(); ++i) {
    if (!b.local[v].valid[i]) continue;
    if (seen++ % 3 == 0) {
      corrupted[i] = 1;
      b.local[v].points[i] += Vec3(0.4, -0.3, 0.2);
      b.local_conf[v].set_raw(i, -20.0);
    }
  }
  auto clean_rms = [&](const SimilarityTransform& t) {
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < b.local[v].size(); ++i) {
      if (!b.local[v].valid[i] || corrupted[i]) continue;
      ss += (t.apply(b.local[v].points[i]) - b.global[v].points[i]).squaredNorm();
      ++n;
    }
    return std::sqrt(ss / static_cast<double>(n));
  };
  for (int rounds : {0, 2}) {
    AlignOptions weighted;
    weighted.trim_rounds = rounds;
    AlignOptions plain = weighted;
    plain.conf_weighting = false;
    const double w = clean_rms(*align_local_to_global(b, weighted).second.transforms[v]);
    const double p = clean_rms(*align_local_to_global(b, plain).second.transforms[v]);
    CHECK(w < p);
  }
}

TEST_CASE("pose metrics examples") {
  std::vector<CameraModel> gt(2);
  gt[1].pose.translation = Vec3(1, 0, 0);
  const std::vector<double> thresholds{5.0, 15.0, 30.0};
  const PoseMetrics exact = pose_metrics(gt, gt, thresholds);
  for (double t : thresholds) {
    CHECK(exact.rra_at.at(t) == 1.0);
    CHECK(exact.rta_at.at(t) == 1.0);
  }
  CHECK(exact.maa30 == 1.0);

  std::vector<CameraModel> pred = gt;
  pred[1].pose.rotation = rot_z(20.0);
  pred[1].pose.translation = rot_z(20.0) * Vec3(1, 0, 0);
  const auto errs = pairwise_pose_errors(pred, gt);
  REQUIRE(errs.size() == 1);
  CHECK(errs[0].rotation_deg == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(errs[0].translation_deg < 1e-9);
  const PoseMetrics m = pose_metrics(pred, gt, thresholds);
  CHECK(m.rra_at.at(15.0) == 0.0);
  CHECK(m.rra_at.at(30.0) == 1.0);
  CHECK(m.rta_at.at(15.0) == 1.0);
  CHECK(m.maa30 == doctest::Approx(10.0 / 30.0).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(pose_metrics(std::span<const CameraModel>(gt).first(1), std::span<const CameraModel>(gt).first(1),
                                    thresholds),
                       doctest::Contains("TooFewViews"), Error);
  std::vector<CameraModel> three(3);
  CHECK_THROWS_AS(pose_metrics(three, gt, thresholds), Error);
}

TEST_CASE("pose metrics against a brute-force reference") {
  std::mt19937_64 rng(14);
  std::vector<double> thresholds;
  for (int t = 1; t <= 30; ++t) thresholds.push_back(t);
  for (int trial = 0; trial < 20; ++trial) {
    const auto gt = random_cameras(rng, 6);
    auto pred = gt;
    for (auto& c : pred) {
      const RigidTransform noise{Eigen::AngleAxisd(0.3 * std::uniform_real_distribution<double>(0.0, 1.0)(rng),
                                                   random_vec(rng).normalized())
                                     .toRotationMatrix(),
                                 random_vec(rng, 0.5)};
      c.pose = compose(c.pose, noise);
    }
    const auto ours = pairwise_pose_errors(pred, gt);
    const auto ref = brute_force_errors(pred, gt);
    REQUIRE(ours.size() == ref.size());
    for (std::size_t k = 0; k < ref.size(); ++k) {
      CHECK(std::abs(ours[k].rotation_deg - ref[k].rotation_deg) < 1e-12);
      CHECK(std::abs(ours[k].translation_deg - ref[k].translation_deg) < 1e-12);
    }
    const PoseMetrics m = pose_metrics(pred, gt, thresholds);
    double maa = 0.0;
    for (int t = 1; t <= 30; ++t) {
      std::size_t rra = 0, rta = 0, joint = 0;
      for (const auto& e : ours) {
        rra += e.rotation_deg < t;
        rta += e.translation_deg < t;
        joint += std::max(e.rotation_deg, e.translation_deg) < t;
      }
      const double n = static_cast<double>(ours.size());
      CHECK(m.rra_at.at(t) == static_cast<double>(rra) / n);
      CHECK(m.rta_at.at(t) == static_cast<double>(rta) / n);
      maa += static_cast<double>(joint) / n;
    }
    CHECK(std::abs(m.maa30 - maa / 30.0) < 1e-12);
    CHECK(m.maa30 <= 1.0);

    // Moving every camera by one rigid transform changes nothing.
    const RigidTransform g = random_rigid(rng, 3.0);
    auto moved = gt;
    for (auto& c : moved) c.pose = compose(g, c.pose);
    const auto shifted = pairwise_pose_errors(pred, moved);
    for (std::size_t k = 0; k < ours.size(); ++k) {
      CHECK(std::abs(shifted[k].rotation_deg - ours[k].rotation_deg) < 1e-9);
      CHECK(std::abs(shifted[k].translation_deg - ours[k].translation_deg) < 1e-9);
    }
  }
}

TEST_CASE("kd-tree matches brute force") {
  std::mt19937_64 rng(15);
  const auto pts = random_cloud(rng, 1000);
  const KdTree tree(pts);
  CHECK(tree.size() == 1000);
  for (int q = 0; q < 500; ++q) {
    const Vec3 query = random_vec(rng, 1.2);
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if ((pts[i] - query).squaredNorm() < (pts[best] - query).squaredNorm()) best = i;
    const auto n = tree.nearest(query);
    CHECK(n.index == best);
    CHECK(n.squared_distance == (pts[best] - query).squaredNorm());
  }
  for (std::size_t i = 0; i < 50; ++i) CHECK(tree.nearest(pts[i]).index == i);
  const std::vector<Vec3> dup{{0, 0, 0}, {1, 1, 1}, {0, 0, 0}};
  CHECK(KdTree(dup).nearest(Vec3(0.1, 0, 0)).index == 0);
  CHECK_THROWS_WITH_AS(KdTree(std::vector<Vec3>{}).nearest(Vec3::Zero()), doctest::Contains("EmptyCloud"), Error);
}

TEST_CASE("reconstruction metrics") {
  std::mt19937_64 rng(16);
  const auto gt = random_cloud(rng, 400);
  const auto same = reconstruction_metrics(gt, gt);
  CHECK(same.acc_median == 0.0);
  CHECK(same.comp_median == 0.0);

  const std::vector<Vec3> a{{0, 0, 0}};
  const std::vector<Vec3> b{{0.01, 0, 0}};
  const auto single = reconstruction_metrics(b, a);
  CHECK(single.acc_median == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(single.comp_median == doctest::Approx(0.01).epsilon(1e-12));

  for (int trial = 0; trial < 5; ++trial) {
    const auto pred = random_cloud(rng, 300 + trial);
    const auto m = reconstruction_metrics(pred, gt);
    CHECK(m.acc_median == brute_force_median(brute_force_nn(pred, gt)));
    CHECK(m.comp_median == brute_force_median(brute_force_nn(gt, pred)));
    const auto swapped = reconstruction_metrics(gt, pred);
    CHECK(swapped.comp_median == m.acc_median);
    CHECK(swapped.acc_median == m.comp_median);
  }
  CHECK_THROWS_WITH_AS(reconstruction_metrics(std::vector<Vec3>{}, gt), doctest::Contains("EmptyCloud"), Error);
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median({7.0}) == 7.0);
}

TEST_CASE("depth metrics") {
  RenderSettings rs;
  rs.views = 2;
  const GroundTruthSample gt = generate_sample(rs, 17);
  const std::vector<std::vector<std::uint8_t>> masks{gt.mask(0), gt.mask(1)};
  const DepthMetrics exact = depth_metrics(gt.local, gt.local, masks);
  CHECK(exact.rel == 0.0);
  CHECK(exact.tau == 100.0);

  auto scaled = [&](double s) {
    std::vector<Pointmap> out = gt.local;
    for (auto& pm : out)
      for (auto& p : pm.points) p *= s;
    return out;
  };
  const DepthMetrics over10 = depth_metrics(scaled(1.10), gt.local, masks);
  CHECK(over10.rel == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(over10.tau == 0.0);
  const DepthMetrics over2 = depth_metrics(scaled(1.02), gt.local, masks);
  CHECK(over2.rel == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(over2.tau == 100.0);

  std::vector<Pointmap> bad = gt.local;
  for (std::size_t i = 0; i < bad[0].size(); ++i)
    if (masks[0][i]) {
      bad[0].points[i].z() = 0.0;
      break;
    }
  CHECK_THROWS_WITH_AS(depth_metrics(gt.local, bad, masks), doctest::Contains("NonPositiveGtDepth"), Error);
  const std::vector<std::vector<std::uint8_t>> none{std::vector<std::uint8_t>(gt.mask(0).size(), 0),
                                                    std::vector<std::uint8_t>(gt.mask(1).size(), 0)};
  CHECK_THROWS_AS(depth_metrics(gt.local, gt.local, none), Error);
}

TEST_CASE("metric report round trip") {
  MetricReport r;
  r.add("rra@15", 0.75);
  r.add("acc_median", 0.1 + 0.2);
  const auto path = std::filesystem::temp_directory_path() / "f3r_test_metrics.txt";
  r.write(path.string());
  const MetricReport back = MetricReport::read(path.string());
  CHECK(back.entries() == r.entries());
  CHECK(back.find("rra@15") == 0.75);
  CHECK_FALSE(back.find("missing").has_value());
  CHECK(r.table().find("acc_median") != std::string::npos);
  std::filesystem::remove(path);
}
