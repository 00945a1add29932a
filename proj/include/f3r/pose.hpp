#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f3r/error.hpp"
#include "f3r/geometry.hpp"
#include "f3r/model.hpp"

namespace f3r {

struct RansacConfig {
  std::size_t iterations = 512;
  double threshold_px = 2.0;
  double confidence_fraction = 0.15;
  std::size_t focal_candidate_count = 16;
  std::size_t min_inliers = 6;
  std::size_t refine_iterations = 10;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const;
};

struct PoseEstimate {
  CameraModel camera;
  std::size_t inlier_count = 0;
  std::size_t outlier_count = 0;
  double focal_score = 0.0;  // outlier count of the chosen focal, lower is better
  std::vector<std::size_t> inliers;  // indices into the correspondence list
};

/// Row-major mask of the highest-confidence valid pixels; keeps
/// max(ceil(fraction * valid), 3). Ties go to the earlier pixel.
std::vector<std::uint8_t> confidence_top_fraction(const ConfidenceMap& conf, std::span<const std::uint8_t> mask,
                                                  double fraction);

/// Horizontal FOVs evenly spaced over [25, 120] degrees, as focal lengths.
std::vector<double> focal_candidates(std::size_t h, std::size_t w, std::size_t count);

/// Camera-to-world poses consistent with three world points seen at three
/// pixels. At most four solutions.
std::vector<RigidTransform> solve_p3p(std::span<const Vec3> pts3d, std::span<const Pixel> px,
                                      const CameraIntrinsics& k);

/// Robust pose from 2-D/3-D correspondences. With refine_focal the final
/// Gauss-Newton stage also adjusts the focal length.
PoseEstimate ransac_pnp(std::span<const Vec3> pts3d, std::span<const Pixel> px, const CameraIntrinsics& k,
                        const RansacConfig& cfg, bool refine_focal = false);

/// Index of the candidate with the fewest outliers; ties go to the candidate
/// closest to the middle of the list, then to the earlier one. Empty entries
/// are failed runs.
std::optional<std::size_t> pick_focal_candidate(std::span<const std::optional<std::size_t>> outliers);

/// Pose of one view from its global pointmap. Without a fixed focal a
/// candidate sweep picks the focal with the fewest outliers.
PoseEstimate estimate_camera(const Pointmap& global, const ConfidenceMap& conf, std::span<const std::uint8_t> mask,
                             const RansacConfig& cfg, std::optional<double> fixed_focal = std::nullopt);

struct ViewPose {
  std::optional<PoseEstimate> estimate;
  std::optional<ErrorKind> error;
  std::string message;
};

/// Per-view estimates from the global head. Pixels invalid in the global
/// pointmap are ignored. With shared_camera the first view's focal is reused.
std::vector<ViewPose> estimate_all_cameras(const PredictionBundle& bundle, const RansacConfig& cfg,
                                           bool shared_camera);

void write_pose_file(const std::string& path, std::span<const ViewPose> poses);

}  // namespace f3r
