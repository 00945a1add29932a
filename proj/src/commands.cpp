#include "f3r/commands.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <new>
#include <random>

#include "f3r/error.hpp"
#include "f3r/pose.hpp"

namespace f3r {

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

std::string in_dir(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return (fs::path(dir) / name).string();
}

template <typename Fn>
auto with_model(const ModelConfig& config, Fn&& fn) {
  if (config.precision == Precision::Double) {
    FusionModel<double> model(config);
    return fn(model);
  }
  FusionModel<float> model(config);
  return fn(model);
}

const GroundTruthSample& sample_for(const PredictionRecord& r, std::span<const GroundTruthSample> dataset) {
  if (r.sample >= dataset.size()) throw Error(ErrorKind::Schema, "prediction refers to a sample missing from the dataset");
  return dataset[r.sample];
}

GroundTruthSample matching_views(const PredictionRecord& r, std::span<const GroundTruthSample> dataset) {
  const GroundTruthSample& full = sample_for(r, dataset);
  if (r.views.size() != r.bundle.view_count()) throw Error(ErrorKind::Schema, "prediction view list is inconsistent");
  for (std::uint32_t v : r.views) {
    if (v >= full.view_count()) throw Error(ErrorKind::Schema, "prediction views do not match the dataset's view count");
  }
  if (full.images.height != r.images.height || full.images.width != r.images.width) {
    throw Error(ErrorKind::Schema, "prediction and dataset image sizes differ");
  }
  std::vector<std::size_t> order(r.views.begin(), r.views.end());
  return select_views(full, order);
}

// Prediction validity restricted to pixels that carry ground-truth geometry.
PredictionBundle masked_bundle(const PredictionRecord& r, const GroundTruthSample& gt, bool use_gt_mask) {
  PredictionBundle b = r.bundle;
  if (!use_gt_mask) return b;
  for (std::size_t v = 0; v < b.view_count(); ++v) {
    for (std::size_t i = 0; i < b.global[v].size(); ++i) {
      b.global[v].valid[i] = b.global[v].valid[i] && gt.mask(v)[i];
      b.local[v].valid[i] = b.local[v].valid[i] && gt.mask(v)[i];
    }
  }
  return b;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string threshold_name(const char* prefix, double t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s@%g", prefix, t);
  return buf;
}

std::uint64_t peak_resident_bytes() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return static_cast<std::uint64_t>(usage.ru_maxrss) * 1024;
}

std::array<std::uint8_t, 3> to_rgb(const float* px) {
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(std::clamp(px[k], 0.0f, 1.0f) * 255.0f));
  return c;
}

}  // namespace

GenDataSummary cmd_gen_data(const RunConfig& config, const std::string& out_dir, std::ostream& log) {
  std::vector<GroundTruthSample> samples;
  samples.reserve(config.data.n_scenes);
  for (std::size_t i = 0; i < config.data.n_scenes; ++i) {
    samples.push_back(generate_sample(config.data.render, derive_seed(config.seed, i)));
  }
  GenDataSummary s;
  s.path = in_dir(out_dir, kDatasetFile);
  write_dataset(samples, s.path);
  s.samples = samples.size();
  s.views = config.data.render.views;
  log << "wrote " << s.samples << " samples x " << s.views << " views to " << s.path << '\n';
  return s;
}

std::vector<TrainRun> cmd_train(const RunConfig& config, const TrainOptions& options, std::ostream& log) {
  const auto dataset = read_dataset(options.dataset);
  if (dataset.empty()) throw Error(ErrorKind::Config, "training dataset is empty");
  if (options.resume && !options.views_sweep.empty()) {
    throw Error(ErrorKind::Config, "resume cannot be combined with a views sweep");
  }
  std::vector<std::size_t> sweep = options.views_sweep;
  if (sweep.empty()) sweep.push_back(config.train.views_per_sample);

  std::vector<TrainRun> runs;
  for (std::size_t n : sweep) {
    TrainConfig cfg = config.train;
    cfg.views_per_sample = n;
    cfg.pool_size = config.model.pool_size;
    cfg.validate();
    TrainRun run;
    run.views_per_sample = n;
    run.out_dir = options.views_sweep.empty() ? options.out_dir
                                              : (fs::path(options.out_dir) / ("views_" + std::to_string(n))).string();
    FitOptions fo{run.out_dir, options.resume};
    run.fit = with_model(config.model, [&](auto& model) {
      model.init(config.seed);
      return fit(model, std::span<const GroundTruthSample>(dataset), cfg, fo);
    });
    if (!run.fit.log.empty()) {
      log << "views=" << n << " steps=" << run.fit.log.back().step << " loss_first=" << fmt(run.fit.log.front().loss_total)
          << " loss_final=" << fmt(run.fit.log.back().loss_total) << '\n';
    }
    log << "checkpoint " << run.fit.final_checkpoint << '\n';
    runs.push_back(std::move(run));
  }
  return runs;
}

std::vector<PredictionRecord> run_inference(const Checkpoint& checkpoint, std::span<const GroundTruthSample> dataset,
                                            const RunConfig& config) {
  return with_model(checkpoint.config, [&](auto& model) {
    load_params(model, checkpoint);
    std::vector<PredictionRecord> records;
    ForwardOptions opts;
    opts.jobs = config.jobs;
    for (std::size_t s = 0; s < dataset.size(); ++s) {
      const GroundTruthSample& sample = dataset[s];
      const std::size_t n = config.infer.views == 0 ? sample.view_count() : config.infer.views;
      if (n > sample.view_count()) {
        throw Error(ErrorKind::Config, "sample " + std::to_string(s) + " has only " +
                                           std::to_string(sample.view_count()) + " views");
      }
      PredictionRecord r;
      r.sample = static_cast<std::uint32_t>(s);
      for (std::uint32_t v = 0; v < n; ++v) r.views.push_back(v);
      std::mt19937_64 rng(derive_seed(config.seed, s));
      r.slots = config.infer.pool_sampling ? sample_index_assignment(n, model.config().pool_size, rng)
                                           : consecutive_index_assignment(n, model.config().pool_size);
      r.images = ImageSet(n, sample.images.height, sample.images.width);
      std::copy_n(sample.images.pixels.begin(), r.images.pixels.size(), r.images.pixels.begin());
      r.bundle = model.forward(r.images, r.slots, opts);
      records.push_back(std::move(r));
    }
    return records;
  });
}

std::vector<PredictionRecord> cmd_infer(const RunConfig& config, const std::string& checkpoint,
                                        const std::string& dataset, const std::string& out_dir, std::ostream& log) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  const auto data = read_dataset(dataset);
  auto records = run_inference(ckpt, data, config);
  const std::string path = in_dir(out_dir, kPredictionFile);
  write_predictions(records, path);
  log << "wrote " << records.size() << " predictions to " << path << '\n';
  return records;
}

PredictionRecord record_from_ground_truth(const GroundTruthSample& sample, std::uint32_t index) {
  PredictionRecord r;
  r.sample = index;
  const std::size_t n = sample.view_count();
  for (std::uint32_t v = 0; v < n; ++v) r.views.push_back(v);
  r.slots = consecutive_index_assignment(n, static_cast<std::uint32_t>(std::max<std::size_t>(n, 1)));
  r.images = sample.images;
  for (std::size_t v = 0; v < n; ++v) {
    const auto& l = sample.local[v];
    r.bundle.local.push_back(l);
    r.bundle.global.push_back(sample.global[v]);
    r.bundle.local_conf.emplace_back(l.height, l.width, 0.0);
    r.bundle.global_conf.emplace_back(l.height, l.width, 0.0);
  }
  return r;
}

PoseEvaluation evaluate_poses(const RunConfig& config, std::span<const PredictionRecord> records,
                              std::span<const GroundTruthSample> dataset, const std::string& out_dir) {
  if (records.empty()) throw Error(ErrorKind::Schema, "no predictions to evaluate");
  PoseEvaluation out;
  std::size_t failed = 0, views = 0;
  double focal_err = 0.0;
  std::size_t focal_n = 0;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const PredictionRecord& r = records[k];
    const GroundTruthSample gt = matching_views(r, dataset);
    if (gt.view_count() < 2) throw Error(ErrorKind::TooFewViews, "pose evaluation needs at least 2 views");
    const PredictionBundle bundle = masked_bundle(r, gt, config.eval.use_gt_mask);
    RansacConfig rc = config.ransac;
    rc.seed = derive_seed(config.ransac.seed, k);
    auto poses = estimate_all_cameras(bundle, rc, config.eval.shared_camera);
    if (!out_dir.empty()) write_pose_file(in_dir(out_dir, "poses_" + std::to_string(k) + ".txt"), poses);

    std::vector<CameraModel> pred(gt.view_count());
    for (std::size_t v = 0; v < pred.size(); ++v) {
      ++views;
      if (poses[v].estimate) {
        pred[v] = poses[v].estimate->camera;
        focal_err += std::abs(pred[v].intrinsics.focal / gt.cameras[v].intrinsics.focal - 1.0);
        ++focal_n;
      } else {
        ++failed;
      }
    }
    auto errors = pairwise_pose_errors(pred, gt.cameras);
    std::size_t p = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      for (std::size_t j = i + 1; j < pred.size(); ++j, ++p)
        if (!poses[i].estimate || !poses[j].estimate) errors[p] = {180.0, 180.0};
    out.pair_errors.insert(out.pair_errors.end(), errors.begin(), errors.end());
    out.poses.push_back(std::move(poses));
  }
  const PoseMetrics m = pose_metrics_from_errors(out.pair_errors, config.eval.thresholds);
  for (const auto& [t, v] : m.rra_at) out.report.add(threshold_name("rra", t), v);
  for (const auto& [t, v] : m.rta_at) out.report.add(threshold_name("rta", t), v);
  out.report.add("maa30", m.maa30);
  out.report.add("pairs", static_cast<double>(out.pair_errors.size()));
  out.report.add("views", static_cast<double>(views));
  out.report.add("failed_views", static_cast<double>(failed));
  out.report.add("focal_rel_err_mean", focal_n ? focal_err / static_cast<double>(focal_n) : std::nan(""));
  if (!out_dir.empty()) out.report.write(in_dir(out_dir, kPoseMetricsFile));
  return out;
}

MetricReport cmd_eval_pose(const RunConfig& config, const std::string& predictions, const std::string& dataset,
                           const std::string& out_dir, std::ostream& log) {
  const auto records = read_predictions(predictions);
  const auto data = read_dataset(dataset);
  const PoseEvaluation e = evaluate_poses(config, records, data, out_dir);
  log << e.report.table();
  return e.report;
}

MetricReport evaluate_reconstruction(const RunConfig& config, std::span<const PredictionRecord> records,
                                     std::span<const GroundTruthSample> dataset, const std::string& out_dir) {
  if (records.empty()) throw Error(ErrorKind::Schema, "no predictions to evaluate");
  double acc_g = 0, comp_g = 0, acc_l = 0, comp_l = 0, rel = 0, tau = 0;
  for (const PredictionRecord& r : records) {
    const GroundTruthSample gt = matching_views(r, dataset);
    const PredictionBundle bundle = masked_bundle(r, gt, config.eval.use_gt_mask);
    const std::size_t n = gt.view_count();

    std::vector<Vec3> gt_cloud;
    for (std::size_t v = 0; v < n; ++v)
      for (std::size_t i = 0; i < gt.global[v].size(); ++i)
        if (gt.mask(v)[i]) gt_cloud.push_back(gt.global[v].points[i]);

    // Predictions carry an arbitrary scale; bring them into the metric frame
    // through their pixel correspondences with the ground truth.
    SimilarityTransform to_gt;
    if (config.eval.align_to_gt) {
      std::vector<Vec3> src, dst;
      for (std::size_t v = 0; v < n; ++v)
        for (std::size_t i = 0; i < gt.global[v].size(); ++i)
          if (bundle.global[v].valid[i] && gt.mask(v)[i]) {
            src.push_back(bundle.global[v].points[i]);
            dst.push_back(gt.global[v].points[i]);
          }
      const std::vector<double> w(src.size(), 1.0);
      to_gt = weighted_umeyama(src, dst, w, true);
    }

    std::vector<Vec3> global_pts;
    for (const Vec3& p : global_cloud(bundle).points) global_pts.push_back(to_gt.apply(p));
    AlignOptions ao = config.eval.align;
    ao.jobs = config.jobs;
    std::vector<Vec3> local_pts;
    for (const Vec3& p : align_local_to_global(bundle, ao).first.points) local_pts.push_back(to_gt.apply(p));

    const ReconstructionMetrics g = reconstruction_metrics(global_pts, gt_cloud);
    const ReconstructionMetrics l = reconstruction_metrics(local_pts, gt_cloud);
    acc_g += g.acc_median;
    comp_g += g.comp_median;
    acc_l += l.acc_median;
    comp_l += l.comp_median;

    std::vector<Pointmap> depth_pred;
    std::vector<std::vector<std::uint8_t>> masks;
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<std::uint8_t> mask(gt.mask(v).size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = gt.mask(v)[i] && bundle.local[v].valid[i];
      Pointmap pm = bundle.local[v];
      if (config.eval.depth_median_scale) {
        std::vector<double> pz, gz;
        for (std::size_t i = 0; i < mask.size(); ++i)
          if (mask[i]) {
            pz.push_back(pm.points[i].z());
            gz.push_back(gt.local[v].points[i].z());
          }
        if (!pz.empty()) {
          const double mp = median(pz);
          if (std::abs(mp) > 1e-12) {
            const double s = median(gz) / mp;
            for (auto& p : pm.points) p *= s;
          }
        }
      }
      depth_pred.push_back(std::move(pm));
      masks.push_back(std::move(mask));
    }
    const DepthMetrics d = depth_metrics(depth_pred, gt.local, masks);
    rel += d.rel;
    tau += d.tau;
  }
  const double k = static_cast<double>(records.size());
  MetricReport report;
  report.add("acc_global", acc_g / k);
  report.add("comp_global", comp_g / k);
  report.add("acc_local_aligned", acc_l / k);
  report.add("comp_local_aligned", comp_l / k);
  report.add("acc_delta", (acc_l - acc_g) / k);
  report.add("comp_delta", (comp_l - comp_g) / k);
  report.add("depth_rel", rel / k);
  report.add("depth_tau", tau / k);
  report.add("samples", k);
  if (!out_dir.empty()) report.write(in_dir(out_dir, kReconMetricsFile));
  return report;
}

MetricReport cmd_eval_recon(const RunConfig& config, const std::string& predictions, const std::string& dataset,
                            const std::string& out_dir, std::ostream& log) {
  const auto records = read_predictions(predictions);
  const auto data = read_dataset(dataset);
  MetricReport report = evaluate_reconstruction(config, records, data, out_dir);
  log << report.table();
  return report;
}

std::vector<BenchmarkRow> cmd_benchmark(const RunConfig& config, const std::optional<std::string>& checkpoint,
                                        const std::string& out_dir, std::ostream& log) {
  std::optional<Checkpoint> ckpt;
  if (checkpoint) ckpt = read_checkpoint(*checkpoint);
  const ModelConfig mc = ckpt ? ckpt->config : config.model;
  std::vector<std::size_t> counts = config.benchmark.view_counts;
  std::sort(counts.begin(), counts.end());
  const std::size_t h = config.data.render.height;
  const std::size_t w = config.data.render.width;

  auto rows = with_model(mc, [&](auto& model) {
    if (ckpt) {
      load_params(model, *ckpt);
    } else {
      model.init(config.seed);
    }
    ForwardOptions opts;
    opts.jobs = config.jobs;
    std::vector<BenchmarkRow> out;
    for (std::size_t n : counts) {
      BenchmarkRow row;
      row.n_views = n;
      row.tokens = static_cast<std::uint64_t>(n * h * w / (std::size_t{mc.patch_size} * mc.patch_size));
      try {
        std::mt19937_64 rng(derive_seed(config.seed, n));
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        ImageSet images(n, h, w);
        for (auto& p : images.pixels) p = u(rng);
        const IndexAssignment slots = sample_index_assignment(n, mc.pool_size, rng);
        model.forward(images, slots, opts);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t rep = 0; rep < config.benchmark.repeats; ++rep) {
          const auto t0 = std::chrono::steady_clock::now();
          const PredictionBundle b = model.forward(images, slots, opts);
          const auto t1 = std::chrono::steady_clock::now();
          best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
        }
        row.wall_time_seconds = best;
      } catch (const std::bad_alloc&) {
        row.status = std::string(error_kind_name(ErrorKind::OutOfMemory));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::PoolTooSmall) throw;
        row.status = std::string(error_kind_name(e.kind()));
      }
      row.peak_resident_bytes = peak_resident_bytes();
      log << "n_views=" << n << " tokens=" << row.tokens << " wall=" << fmt(row.wall_time_seconds)
          << "s status=" << row.status << '\n';
      out.push_back(row);
    }
    return out;
  });
  if (!out_dir.empty()) write_benchmark_csv(rows, in_dir(out_dir, kBenchmarkFile));
  return rows;
}

void write_benchmark_csv(std::span<const BenchmarkRow> rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  out << "n_views,wall_time_seconds,peak_resident_bytes,tokens,status\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9f", r.wall_time_seconds);
    out << r.n_views << ',' << buf << ',' << r.peak_resident_bytes << ',' << r.tokens << ',' << r.status << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path);
}

std::size_t cmd_export_ply(const RunConfig& config, const ExportOptions& options, std::ostream& log) {
  ColoredCloud cloud;
  if (options.predictions.empty()) {
    const auto data = read_dataset(options.dataset);
    if (options.sample >= data.size()) throw Error(ErrorKind::Config, "sample index out of range");
    const GroundTruthSample& s = data[options.sample];
    for (std::size_t v = 0; v < s.view_count(); ++v)
      for (std::size_t i = 0; i < s.global[v].size(); ++i) {
        if (!s.mask(v)[i]) continue;
        cloud.points.push_back(s.global[v].points[i]);
        cloud.colors.push_back(to_rgb(s.images.view(v) + i * 3));
      }
  } else {
    const auto records = read_predictions(options.predictions);
    if (options.sample >= records.size()) throw Error(ErrorKind::Config, "sample index out of range");
    const PredictionRecord& r = records[options.sample];
    const bool aligned = options.source == CloudSource::LocalAligned;
    auto keep = [&](std::size_t v, std::size_t i) {
      if (!options.min_confidence) return true;
      const ConfidenceMap& c = aligned ? r.bundle.local_conf[v] : r.bundle.global_conf[v];
      return c.raw(i) >= *options.min_confidence;
    };
    MergedCloud merged;
    if (aligned) {
      AlignOptions ao = config.eval.align;
      ao.jobs = config.jobs;
      merged = align_local_to_global(r.bundle, ao).first;
    } else {
      merged = global_cloud(r.bundle);
    }
    for (std::size_t k = 0; k < merged.points.size(); ++k) {
      const std::size_t v = merged.view[k];
      const std::size_t i = merged.pixel[k];
      if (!keep(v, i)) continue;
      cloud.points.push_back(merged.points[k]);
      cloud.colors.push_back(to_rgb(r.images.view(v) + i * 3));
    }
  }
  if (cloud.points.empty()) throw Error(ErrorKind::EmptyCloud, "no points left to export");
  const fs::path parent = fs::path(options.out_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_ply(cloud, options.out_path);
  log << "wrote " << cloud.points.size() << " points to " << options.out_path << '\n';
  return cloud.points.size();
}

}  // namespace f3r
