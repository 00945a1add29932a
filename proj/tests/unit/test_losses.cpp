#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "f3r/error.hpp"
#include "f3r/losses.hpp"
#include "test_util.hpp"

using namespace f3r;

namespace {

Pointmap random_pointmap(std::size_t h, std::size_t w, std::mt19937_64& rng, Frame f) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Pointmap pm(h, w, f);
  for (auto& p : pm.points) p = Vec3(u(rng), u(rng), 2.0 + u(rng));
  return pm;
}

GroundTruthSample random_sample(std::size_t n, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  GroundTruthSample gt;
  gt.images = ImageSet(n, h, w);
  std::bernoulli_distribution hole(0.2);
  for (std::size_t v = 0; v < n; ++v) {
    gt.local.push_back(random_pointmap(h, w, rng, Frame::Local));
    gt.global.push_back(random_pointmap(h, w, rng, Frame::Global));
    for (std::size_t i = 0; i < h * w; ++i) gt.local[v].valid[i] = i == 0 || !hole(rng);
    gt.global[v].valid = gt.local[v].valid;
    gt.cameras.push_back({});
  }
  return gt;
}

PredictionBundle random_prediction(const GroundTruthSample& gt, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  PredictionBundle b;
  for (std::size_t v = 0; v < gt.view_count(); ++v) {
    const std::size_t h = gt.local[v].height, w = gt.local[v].width;
    b.local.push_back(random_pointmap(h, w, rng, Frame::Local));
    b.global.push_back(random_pointmap(h, w, rng, Frame::Global));
    std::vector<double> cl(h * w), cg(h * w);
    for (auto& x : cl) x = n(rng);
    for (auto& x : cg) x = n(rng);
    b.local_conf.emplace_back(h, w, cl);
    b.global_conf.emplace_back(h, w, cg);
  }
  return b;
}

}  // namespace

TEST_CASE("mean_euclidean_norm") {
  const std::vector<Vec3> one = {Vec3(3, 4, 0)};
  const std::vector<std::uint8_t> m1 = {1};
  CHECK(mean_euclidean_norm(one, m1) == 5.0);
  const std::vector<Vec3> two = {Vec3(1, 0, 0), Vec3(0, 2, 0), Vec3(100, 0, 0)};
  const std::vector<std::uint8_t> m2 = {1, 1, 0};
  CHECK(mean_euclidean_norm(two, m2) == 1.5);
  const std::vector<Vec3> zero = {Vec3::Zero(), Vec3::Zero()};
  const std::vector<std::uint8_t> m3 = {1, 1};
  CHECK_THROWS_WITH_AS(mean_euclidean_norm(zero, m3), doctest::Contains("DegenerateScale"), Error);
  const std::vector<std::uint8_t> none = {0, 0};
  CHECK_THROWS_WITH_AS(mean_euclidean_norm(zero, none), doctest::Contains("EmptyMask"), Error);
}

TEST_CASE("normalized regression loss examples") {
  Pointmap pred(1, 1, Frame::Local), target(1, 1, Frame::Local);
  pred.points[0] = Vec3(0, 2, 0);
  target.points[0] = Vec3(1, 0, 0);
  const std::vector<std::uint8_t> mask = {1};
  CHECK(normalized_regression_loss(pred, target, mask)[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(normalized_regression_loss(target, target, mask)[0] == 0.0);
}

TEST_CASE("regression loss is scale invariant but not rotation invariant") {
  std::mt19937_64 rng(21);
  const Pointmap pred = random_pointmap(4, 4, rng, Frame::Local);
  const Pointmap target = random_pointmap(4, 4, rng, Frame::Local);
  std::vector<std::uint8_t> mask(16, 1);
  mask[3] = 0;
  const auto base = normalized_regression_loss(pred, target, mask);
  for (double c : {0.1, 1.0, 7.3}) {
    const auto scaled_pred = normalized_regression_loss(transform_pointmap(pred, {c, Mat3::Identity(), Vec3::Zero()}), target, mask);
    const auto scaled_target = normalized_regression_loss(pred, transform_pointmap(target, {c, Mat3::Identity(), Vec3::Zero()}), mask);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(std::abs(scaled_pred[i] - base[i]) < 1e-9);
      CHECK(std::abs(scaled_target[i] - base[i]) < 1e-9);
    }
    const auto self = normalized_regression_loss(transform_pointmap(target, {c, Mat3::Identity(), Vec3::Zero()}), target, mask);
    for (double l : self) CHECK(l < 1e-12);
  }
  CHECK(base[3] == 0.0);
  const auto rotated = normalized_regression_loss(transform_pointmap(pred, {1.0, rot_z(40), Vec3::Zero()}), target, mask);
  double diff = 0.0;
  for (std::size_t i = 0; i < 16; ++i) diff += std::abs(rotated[i] - base[i]);
  CHECK(diff > 1e-3);
}

TEST_CASE("confidence positive") {
  CHECK(confidence_positive(0.0) == 2.0);
  CHECK(confidence_positive(-20.0) - 1.0 == doctest::Approx(2.061153622438558e-09).epsilon(1e-12));
  CHECK(confidence_positive(-1.0) < confidence_positive(-0.5));
}

TEST_CASE("pointmap loss examples") {
  std::mt19937_64 rng(22);
  const Pointmap target = random_pointmap(3, 3, rng, Frame::Local);
  const std::vector<std::uint8_t> mask(9, 1);
  LossConfig cfg;
  CHECK(pointmap_loss(ConfidenceMap(3, 3, 0.0), target, target, mask, cfg) ==
        doctest::Approx(0.2 * std::log(2.0)).epsilon(1e-14));
  cfg.alpha = 0.0;
  CHECK(pointmap_loss(ConfidenceMap(3, 3, 0.0), target, target, mask, cfg) == 0.0);
  const Pointmap pred = random_pointmap(3, 3, rng, Frame::Local);
  const auto l = normalized_regression_loss(pred, target, mask);
  double mean = 0.0;
  for (double x : l) mean += x / 9.0;
  for (double raw : {-1.0, 0.0, 2.0}) {
    CHECK(pointmap_loss(ConfidenceMap(3, 3, raw), pred, target, mask, cfg) ==
          doctest::Approx(confidence_positive(raw) * mean).epsilon(1e-13));
  }
}

TEST_CASE("regulariser is increasing in confidence when the regression term vanishes") {
  std::mt19937_64 rng(23);
  const Pointmap target = random_pointmap(2, 2, rng, Frame::Local);
  const std::vector<std::uint8_t> mask(4, 1);
  const LossConfig cfg;
  double prev = -1.0;
  for (double raw = -5.0; raw <= 5.0; raw += 0.5) {
    const double l = pointmap_loss(ConfidenceMap(2, 2, raw), target, target, mask, cfg);
    CHECK(l > prev);
    prev = l;
  }
}

TEST_CASE("total loss of exact predictions") {
  std::mt19937_64 rng(24);
  const GroundTruthSample gt = random_sample(3, 3, 3, rng);
  const PredictionBundle b = f3r::testing::bundle_from(gt, 0.0);
  LossConfig cfg;
  const LossReport r = total_loss(b, gt, cfg);
  CHECK(r.total == doctest::Approx(2 * 3 * 0.2 * std::log(2.0)).epsilon(1e-13));
  cfg.alpha = 0.4;
  CHECK(total_loss(b, gt, cfg).total == doctest::Approx(2.0 * r.total).epsilon(1e-13));
  CHECK(std::abs(r.total - (r.global_sum() + r.local_sum())) < 1e-9);
}

TEST_CASE("confidence gradient at an exact prediction is alpha times the logistic") {
  std::mt19937_64 rng(25);
  const GroundTruthSample gt = random_sample(2, 3, 3, rng);
  PredictionBundle b = f3r::testing::bundle_from(gt, 0.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& c : b.local_conf)
    for (std::size_t i = 0; i < c.size(); ++i) c.set_raw(i, n(rng));
  const LossConfig cfg;
  const auto lg = loss_gradients(b, gt, cfg);
  for (std::size_t v = 0; v < 2; ++v) {
    const double count = static_cast<double>(gt.local[v].valid_count());
    for (std::size_t i = 0; i < 9; ++i) {
      const double sigma = 1.0 / (1.0 + std::exp(-b.local_conf[v].raw(i)));
      const double expect = gt.mask(v)[i] ? cfg.alpha * sigma / count : 0.0;
      CHECK(std::abs(lg.grad.local_conf[v][i] - expect) < 1e-14);
    }
  }
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + trial % 3;
    const GroundTruthSample gt = random_sample(n, 4, 4, rng);
    PredictionBundle b = random_prediction(gt, rng);
    LossConfig cfg;
    cfg.confidence_reg_sign = trial % 2 ? 1 : -1;
    const auto lg = loss_gradients(b, gt, cfg);
    const double eps = 1e-5;
    auto f = [&] { return total_loss(b, gt, cfg).total; };
    // Error relative to the largest gradient entry of the instance; single
    // tiny entries sit below the round-off floor of a 1e-5 step.
    double worst_abs = 0.0, scale = 0.0;
    auto compare = [&](double analytic, double numeric) {
      worst_abs = std::max(worst_abs, std::abs(analytic - numeric));
      scale = std::max(scale, std::abs(numeric));
    };
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t i = 0; i < 16; ++i) {
        for (int a = 0; a < 3; ++a) {
          for (auto* pm : {&b.local[v], &b.global[v]}) {
            const double keep = pm->points[i][a];
            pm->points[i][a] = keep + eps;
            const double up = f();
            pm->points[i][a] = keep - eps;
            const double down = f();
            pm->points[i][a] = keep;
            const auto& g = pm == &b.local[v] ? lg.grad.local[v] : lg.grad.global[v];
            compare(g[i][a], (up - down) / (2 * eps));
          }
        }
        for (auto* conf : {&b.local_conf[v], &b.global_conf[v]}) {
          const double keep = conf->raw(i);
          conf->set_raw(i, keep + eps);
          const double up = f();
          conf->set_raw(i, keep - eps);
          const double down = f();
          conf->set_raw(i, keep);
          const auto& g = conf == &b.local_conf[v] ? lg.grad.local_conf[v] : lg.grad.global_conf[v];
          compare(g[i], (up - down) / (2 * eps));
        }
      }
    }
    CHECK(worst_abs / scale < 1e-6);
  }
}

TEST_CASE("masked pixels receive zero gradient") {
  std::mt19937_64 rng(27);
  const GroundTruthSample gt = random_sample(2, 4, 4, rng);
  const PredictionBundle b = random_prediction(gt, rng);
  const auto lg = loss_gradients(b, gt, LossConfig{});
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < 16; ++i)
      if (!gt.mask(v)[i]) {
        CHECK(lg.grad.local[v][i].norm() == 0.0);
        CHECK(lg.grad.global[v][i].norm() == 0.0);
        CHECK(lg.grad.local_conf[v][i] == 0.0);
        CHECK(lg.grad.global_conf[v][i] == 0.0);
      }
}

TEST_CASE("total loss is invariant to permuting views after the first") {
  std::mt19937_64 rng(28);
  const GroundTruthSample gt = random_sample(4, 3, 3, rng);
  const PredictionBundle b = random_prediction(gt, rng);
  const std::size_t perm[] = {0, 3, 1, 2};
  GroundTruthSample gp = gt;
  PredictionBundle bp = b;
  for (std::size_t v = 0; v < 4; ++v) {
    gp.local[v] = gt.local[perm[v]];
    gp.global[v] = gt.global[perm[v]];
    bp.local[v] = b.local[perm[v]];
    bp.global[v] = b.global[perm[v]];
    bp.local_conf[v] = b.local_conf[perm[v]];
    bp.global_conf[v] = b.global_conf[perm[v]];
  }
  const LossConfig cfg;
  CHECK(std::abs(total_loss(b, gt, cfg).total - total_loss(bp, gp, cfg).total) < 1e-9);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.alpha = 0.2;
  cfg.confidence_reg_sign = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
