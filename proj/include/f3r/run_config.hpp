#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "f3r/align_eval.hpp"
#include "f3r/losses.hpp"
#include "f3r/model.hpp"
#include "f3r/pose.hpp"
#include "f3r/synthgen.hpp"
#include "f3r/trainer.hpp"

namespace f3r {

struct DataConfig {
  std::size_t n_scenes = 4;
  RenderSettings render;
};

struct InferConfig {
  std::size_t views = 0;               // 0: every view of the sample
  bool pool_sampling = true;           // false: slots 1..N
};

struct EvalConfig {
  bool shared_camera = true;
  bool use_gt_mask = true;             // drop predicted pixels without ground-truth geometry
  bool align_to_gt = true;             // similarity-align predictions to ground truth before Acc/Comp
  bool depth_median_scale = true;      // per-view median scaling before depth metrics
  AlignOptions align;
  std::vector<double> thresholds{5.0, 15.0, 30.0};
};

struct BenchmarkConfig {
  std::vector<std::size_t> view_counts{2, 4, 8, 16, 32};
  std::size_t repeats = 3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool deterministic = false;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  RansacConfig ransac;
  InferConfig infer;
  EvalConfig eval;
  BenchmarkConfig benchmark;

  /// Pushes seed and jobs into the nested configs and validates them.
  void finalize();
};

/// Throws ConfigError on malformed JSON, wrong types, or unknown keys.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& config);

}  // namespace f3r
