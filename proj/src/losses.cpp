#include "f3r/losses.hpp"

#include <cmath>
#include <numeric>

#include "f3r/error.hpp"

namespace f3r {

void LossConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw Error(ErrorKind::Config, "alpha must be finite and >= 0");
  if (confidence_reg_sign != 1 && confidence_reg_sign != -1) {
    throw Error(ErrorKind::Config, "confidence_reg_sign must be +1 or -1");
  }
}

double LossReport::global_sum() const { return std::accumulate(global_terms.begin(), global_terms.end(), 0.0); }
double LossReport::local_sum() const { return std::accumulate(local_terms.begin(), local_terms.end(), 0.0); }

double mean_euclidean_norm(std::span<const Vec3> points, std::span<const std::uint8_t> mask) {
  if (points.size() != mask.size()) throw Error(ErrorKind::Shape, "mask size differs from pointmap");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!mask[i]) continue;
    sum += points[i].norm();
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::EmptyMask, "no valid pixels");
  const double z = sum / static_cast<double>(n);
  if (z < 1e-12) throw Error(ErrorKind::DegenerateScale, "pointmap collapses to the origin");
  return z;
}

double mean_euclidean_norm(const Pointmap& pm, std::span<const std::uint8_t> mask) {
  return mean_euclidean_norm(std::span<const Vec3>(pm.points), mask);
}

std::vector<double> normalized_regression_loss(const Pointmap& pred, const Pointmap& target,
                                               std::span<const std::uint8_t> mask) {
  if (pred.size() != target.size() || pred.size() != mask.size()) {
    throw Error(ErrorKind::Shape, "pointmap shapes differ");
  }
  const double zp = mean_euclidean_norm(pred, mask);
  const double zt = mean_euclidean_norm(target, mask);
  std::vector<double> out(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i]) out[i] = (pred.points[i] / zp - target.points[i] / zt).norm();
  }
  return out;
}

std::vector<double> confidence_positive(const ConfidenceMap& conf) {
  std::vector<double> out(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) out[i] = conf.positive(i);
  return out;
}

double pointmap_loss(std::span<const double> conf_raw, std::span<const Vec3> pred, std::span<const Vec3> target,
                     std::span<const std::uint8_t> mask, const LossConfig& cfg, std::span<Vec3> d_pred,
                     std::span<double> d_conf) {
  const std::size_t n_px = pred.size();
  if (target.size() != n_px || mask.size() != n_px || conf_raw.size() != n_px) {
    throw Error(ErrorKind::Shape, "loss inputs differ in size");
  }
  const bool want_grad = !d_pred.empty();
  if (want_grad && (d_pred.size() != n_px || d_conf.size() != n_px)) {
    throw Error(ErrorKind::Shape, "gradient buffers differ in size");
  }
  const double zp = mean_euclidean_norm(pred, mask);
  const double zt = mean_euclidean_norm(target, mask);
  std::size_t n = 0;
  for (std::size_t i = 0; i < n_px; ++i) n += mask[i] ? 1 : 0;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double reg = cfg.alpha * static_cast<double>(cfg.confidence_reg_sign);

  double loss = 0.0;
  double dloss_dzp = 0.0;
  for (std::size_t i = 0; i < n_px; ++i) {
    if (!mask[i]) {
      if (want_grad) {
        d_pred[i] = Vec3::Zero();
        d_conf[i] = 0.0;
      }
      continue;
    }
    const double e = std::exp(conf_raw[i]);
    const double c = 1.0 + e;
    const Vec3 u = pred[i] / zp - target[i] / zt;
    const double l = u.norm();
    loss += c * l + reg * std::log(c);
    if (want_grad) {
      d_conf[i] = inv_n * (l + reg / c) * e;
      // d/du of c * |u| / n, stashed until the scale coupling is known.
      const Vec3 g = l > 0.0 ? Vec3(u * (c * inv_n / l)) : Vec3::Zero();
      d_pred[i] = g / zp;
      dloss_dzp -= g.dot(pred[i]) / (zp * zp);
    }
  }
  if (want_grad) {
    // zp = (1/n) sum |x|, so each valid pixel also moves the shared scale.
    for (std::size_t i = 0; i < n_px; ++i) {
      if (!mask[i]) continue;
      const double norm = pred[i].norm();
      if (norm > 0.0) d_pred[i] += dloss_dzp * inv_n * pred[i] / norm;
    }
  }
  return loss * inv_n;
}

double pointmap_loss(const ConfidenceMap& conf, const Pointmap& pred, const Pointmap& target,
                     std::span<const std::uint8_t> mask, const LossConfig& cfg) {
  return pointmap_loss(conf.raw_values(), pred.points, target.points, mask, cfg);
}

namespace {

void check_bundle(const PredictionBundle& bundle, const GroundTruthSample& gt) {
  const std::size_t n = gt.view_count();
  if (bundle.local.size() != n || bundle.global.size() != n || bundle.local_conf.size() != n ||
      bundle.global_conf.size() != n) {
    throw Error(ErrorKind::Shape, "prediction and ground truth view counts differ");
  }
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t px = gt.local[v].size();
    if (bundle.local[v].size() != px || bundle.global[v].size() != px || bundle.local_conf[v].size() != px ||
        bundle.global_conf[v].size() != px) {
      throw Error(ErrorKind::Shape, "prediction and ground truth grids differ");
    }
  }
}

double mean_positive(const ConfidenceMap& conf, std::span<const std::uint8_t> mask) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (mask[i]) {
      s += conf.positive(i);
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

LossWithGradient evaluate(const PredictionBundle& bundle, const GroundTruthSample& gt, const LossConfig& cfg,
                          bool want_grad) {
  cfg.validate();
  check_bundle(bundle, gt);
  LossWithGradient out;
  if (want_grad) out.grad = BundleGradient::zeros_like(bundle);
  LossReport& r = out.report;
  for (std::size_t v = 0; v < gt.view_count(); ++v) {
    const auto& mask = gt.mask(v);
    std::span<Vec3> dg, dl;
    std::span<double> dcg, dcl;
    if (want_grad) {
      dg = out.grad.global[v];
      dl = out.grad.local[v];
      dcg = out.grad.global_conf[v];
      dcl = out.grad.local_conf[v];
    }
    r.global_terms.push_back(pointmap_loss(bundle.global_conf[v].raw_values(), bundle.global[v].points,
                                           gt.global[v].points, mask, cfg, dg, dcg));
    r.local_terms.push_back(pointmap_loss(bundle.local_conf[v].raw_values(), bundle.local[v].points,
                                          gt.local[v].points, mask, cfg, dl, dcl));
    r.mean_conf_global.push_back(mean_positive(bundle.global_conf[v], mask));
    r.mean_conf_local.push_back(mean_positive(bundle.local_conf[v], mask));
  }
  r.total = r.global_sum() + r.local_sum();
  return out;
}

}  // namespace

LossReport total_loss(const PredictionBundle& bundle, const GroundTruthSample& gt, const LossConfig& cfg) {
  return evaluate(bundle, gt, cfg, false).report;
}

LossWithGradient loss_gradients(const PredictionBundle& bundle, const GroundTruthSample& gt, const LossConfig& cfg) {
  return evaluate(bundle, gt, cfg, true);
}

double mean_regression_error(const PredictionBundle& bundle, const GroundTruthSample& gt) {
  check_bundle(bundle, gt);
  double sum = 0.0;
  for (std::size_t v = 0; v < gt.view_count(); ++v) {
    const auto& mask = gt.mask(v);
    const double n = static_cast<double>(gt.local[v].valid_count());
    for (const auto* pair : {&bundle.local, &bundle.global}) {
      const Pointmap& target = pair == &bundle.local ? gt.local[v] : gt.global[v];
      const auto l = normalized_regression_loss((*pair)[v], target, mask);
      sum += std::accumulate(l.begin(), l.end(), 0.0) / n;
    }
  }
  return sum / static_cast<double>(2 * gt.view_count());
}

}  // namespace f3r
