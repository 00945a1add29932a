#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "f3r/geometry.hpp"
#include "f3r/model.hpp"

namespace f3r {

/// Weighted least-squares similarity (or rigid when with_scale is false)
/// mapping src onto dst. Throws DegenerateConfiguration on rank <= 1 scatter.
SimilarityTransform weighted_umeyama(std::span<const Vec3> src, std::span<const Vec3> dst,
                                     std::span<const double> weights, bool with_scale);

struct AlignOptions {
  bool conf_weighting = true;
  bool with_scale = false;
  int trim_rounds = 2;
  double trim_factor = 3.0;
  std::size_t jobs = 1;
};

struct AlignmentResult {
  std::vector<std::optional<SimilarityTransform>> transforms;  // empty for skipped views
  std::vector<double> residual_rms;                              // NaN for skipped views
  std::vector<std::string> errors;                               // empty string on success
};

struct MergedCloud {
  std::vector<Vec3> points;
  std::vector<std::size_t> view;   // source view of each point
  std::vector<std::size_t> pixel;  // source pixel of each point
};

/// Aligns each local pointmap onto the same-pixel global points. Pixels
/// flagged invalid in either map are ignored.
std::pair<MergedCloud, AlignmentResult> align_local_to_global(const PredictionBundle& bundle,
                                                              const AlignOptions& options = {});

/// Valid global points of every view, in view then pixel order.
MergedCloud global_cloud(const PredictionBundle& bundle);

struct PoseMetrics {
  std::map<double, double> rra_at;
  std::map<double, double> rta_at;
  double maa30 = 0.0;
};

struct PairError {
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
};

/// Relative errors of every unordered pair i < j, in lexicographic order.
std::vector<PairError> pairwise_pose_errors(std::span<const CameraModel> pred, std::span<const CameraModel> gt);

PoseMetrics pose_metrics(std::span<const CameraModel> pred, std::span<const CameraModel> gt,
                         std::span<const double> thresholds);
/// Same aggregation over an explicit list of pair errors (possibly pooled
/// from several scenes).
PoseMetrics pose_metrics_from_errors(std::span<const PairError> errors, std::span<const double> thresholds);

struct ReconstructionMetrics {
  double acc_median = 0.0;
  double comp_median = 0.0;
};

ReconstructionMetrics reconstruction_metrics(std::span<const Vec3> pred, std::span<const Vec3> gt);

struct DepthMetrics {
  double rel = 0.0;  // percent
  double tau = 0.0;  // percent
};

DepthMetrics depth_metrics(std::span<const Pointmap> pred, std::span<const Pointmap> gt,
                           std::span<const std::vector<std::uint8_t>> masks);

double median(std::vector<double> values);

/// Ordered name/value pairs written as `metric=<name> value=<v>` lines.
class MetricReport {
 public:
  void add(const std::string& name, double value);
  const std::vector<std::pair<std::string, double>>& entries() const { return entries_; }
  std::optional<double> find(const std::string& name) const;

  void write(const std::string& path) const;
  static MetricReport read(const std::string& path);
  std::string table() const;

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

}  // namespace f3r
