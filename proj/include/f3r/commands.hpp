#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "f3r/align_eval.hpp"
#include "f3r/artifacts.hpp"
#include "f3r/run_config.hpp"
#include "f3r/synthgen.hpp"
#include "f3r/trainer.hpp"

namespace f3r {

inline constexpr char kDatasetFile[] = "dataset.f3rdata";
inline constexpr char kPredictionFile[] = "predictions.f3rpred";
inline constexpr char kPoseMetricsFile[] = "pose_metrics.txt";
inline constexpr char kReconMetricsFile[] = "recon_metrics.txt";
inline constexpr char kBenchmarkFile[] = "benchmark.csv";

/// Deterministic per-item seed derived from a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

struct GenDataSummary {
  std::string path;
  std::size_t samples = 0;
  std::size_t views = 0;
};

/// Renders data.n_scenes samples into out_dir/dataset.f3rdata.
GenDataSummary cmd_gen_data(const RunConfig& config, const std::string& out_dir, std::ostream& log);

struct TrainOptions {
  std::string dataset;
  std::string out_dir;
  std::optional<std::string> resume;
  std::vector<std::size_t> views_sweep;  // empty: a single run at train.views_per_sample
};

struct TrainRun {
  std::size_t views_per_sample = 0;
  std::string out_dir;
  FitResult fit;
};

/// One fit per entry of views_sweep (each under out_dir/views_<N>), or a
/// single fit directly in out_dir.
std::vector<TrainRun> cmd_train(const RunConfig& config, const TrainOptions& options, std::ostream& log);

/// Forward pass per dataset sample over its first infer.views views.
std::vector<PredictionRecord> run_inference(const Checkpoint& checkpoint, std::span<const GroundTruthSample> dataset,
                                            const RunConfig& config);
/// Reads checkpoint and dataset, writes out_dir/predictions.f3rpred.
std::vector<PredictionRecord> cmd_infer(const RunConfig& config, const std::string& checkpoint,
                                        const std::string& dataset, const std::string& out_dir, std::ostream& log);

/// Ground truth dressed as a prediction (exact heads, zero raw confidence).
PredictionRecord record_from_ground_truth(const GroundTruthSample& sample, std::uint32_t index);

struct PoseEvaluation {
  MetricReport report;
  std::vector<std::vector<ViewPose>> poses;  // per record
  std::vector<PairError> pair_errors;         // pooled over records
};

/// Pose recovery from the global head of every record, scored against the
/// matching ground-truth views. Writes pose files and the report when out_dir
/// is non-empty.
PoseEvaluation evaluate_poses(const RunConfig& config, std::span<const PredictionRecord> records,
                              std::span<const GroundTruthSample> dataset, const std::string& out_dir);
MetricReport cmd_eval_pose(const RunConfig& config, const std::string& predictions, const std::string& dataset,
                           const std::string& out_dir, std::ostream& log);

/// Acc/Comp of the raw global head and of local pointmaps aligned onto it,
/// their difference, and depth rel/tau, averaged over records.
MetricReport evaluate_reconstruction(const RunConfig& config, std::span<const PredictionRecord> records,
                                     std::span<const GroundTruthSample> dataset, const std::string& out_dir);
MetricReport cmd_eval_recon(const RunConfig& config, const std::string& predictions, const std::string& dataset,
                            const std::string& out_dir, std::ostream& log);

struct BenchmarkRow {
  std::size_t n_views = 0;
  double wall_time_seconds = 0.0;
  std::uint64_t peak_resident_bytes = 0;
  std::uint64_t tokens = 0;
  std::string status = "ok";
};

/// Times one forward pass per view count (best of benchmark.repeats). Uses the
/// checkpoint when given, otherwise a freshly initialised model.
std::vector<BenchmarkRow> cmd_benchmark(const RunConfig& config, const std::optional<std::string>& checkpoint,
                                        const std::string& out_dir, std::ostream& log);
void write_benchmark_csv(std::span<const BenchmarkRow> rows, const std::string& path);

enum class CloudSource { Global, LocalAligned };

struct ExportOptions {
  std::string predictions;  // prediction file; empty to export ground truth from `dataset`
  std::string dataset;
  std::size_t sample = 0;
  CloudSource source = CloudSource::Global;
  std::optional<double> min_confidence;  // raw confidence threshold
  std::string out_path;
};

/// Writes a colored PLY and returns the number of points. Throws EmptyCloud.
std::size_t cmd_export_ply(const RunConfig& config, const ExportOptions& options, std::ostream& log);

}  // namespace f3r
