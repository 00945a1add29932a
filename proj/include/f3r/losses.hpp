#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "f3r/geometry.hpp"
#include "f3r/model.hpp"
#include "f3r/synthgen.hpp"

namespace f3r {

struct LossConfig {
  double alpha = 0.2;
  // +1 adds alpha * log(conf) as the objective is usually printed; -1 gives
  // the variant that penalises low confidence instead.
  int confidence_reg_sign = 1;

  void validate() const;
};

struct LossReport {
  double total = 0.0;
  std::vector<double> global_terms;  // per view
  std::vector<double> local_terms;   // per view
  std::vector<double> mean_conf_global;
  std::vector<double> mean_conf_local;

  double global_sum() const;
  double local_sum() const;
};

/// Mean distance to the origin over masked-in points. Throws EmptyMask and
/// DegenerateScale (< 1e-12).
double mean_euclidean_norm(std::span<const Vec3> points, std::span<const std::uint8_t> mask);
double mean_euclidean_norm(const Pointmap& pm, std::span<const std::uint8_t> mask);

/// Per-pixel distance between independently normalised prediction and target;
/// masked-out pixels are 0.
std::vector<double> normalized_regression_loss(const Pointmap& pred, const Pointmap& target,
                                               std::span<const std::uint8_t> mask);

inline double confidence_positive(double raw) { return 1.0 + std::exp(raw); }
std::vector<double> confidence_positive(const ConfidenceMap& conf);

/// Confidence-weighted mean of the regression loss plus the log-confidence
/// regulariser, over valid pixels of one view. Optional outputs receive the
/// gradient with respect to the prediction and the raw confidence.
double pointmap_loss(std::span<const double> conf_raw, std::span<const Vec3> pred, std::span<const Vec3> target,
                     std::span<const std::uint8_t> mask, const LossConfig& cfg, std::span<Vec3> d_pred = {},
                     std::span<double> d_conf = {});
double pointmap_loss(const ConfidenceMap& conf, const Pointmap& pred, const Pointmap& target,
                     std::span<const std::uint8_t> mask, const LossConfig& cfg);

/// Sum over views of the global and local pointmap losses (each normalised
/// per view).
LossReport total_loss(const PredictionBundle& bundle, const GroundTruthSample& gt, const LossConfig& cfg);

struct LossWithGradient {
  LossReport report;
  BundleGradient grad;
};

LossWithGradient loss_gradients(const PredictionBundle& bundle, const GroundTruthSample& gt, const LossConfig& cfg);

/// Unweighted regression error averaged over valid pixels, views and both
/// heads.
double mean_regression_error(const PredictionBundle& bundle, const GroundTruthSample& gt);

}  // namespace f3r
