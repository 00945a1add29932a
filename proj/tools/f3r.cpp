#include <filesystem>
#include <iostream>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "f3r/commands.hpp"
#include "f3r/error.hpp"
#include "f3r/kernels.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::size_t> jobs;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic", c.deterministic, "Serialise all work for bitwise reproducibility");
}

f3r::RunConfig resolve(const Common& c) {
  f3r::RunConfig cfg = c.config.empty() ? f3r::RunConfig{} : f3r::load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.jobs) cfg.jobs = *c.jobs;
  if (c.deterministic) cfg.deterministic = true;
  cfg.finalize();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view pointmap reconstruction toolkit"};
  app.require_subcommand(1);
  std::string backend = "auto";
  app.add_option("--backend", backend, "Dense kernel backend")->check(CLI::IsMember({"auto", "scalar", "avx2"}));

  Common gen_c, train_c, infer_c, pose_c, recon_c, bench_c, ply_c;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  add_common(gen, gen_c);
  std::optional<std::size_t> n_scenes;
  gen->add_option("--scenes", n_scenes, "Number of samples");

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, train_c);
  f3r::TrainOptions train_opts;
  std::optional<std::size_t> steps;
  train->add_option("--data", train_opts.dataset, "Dataset file")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", train_opts.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--views-sweep", train_opts.views_sweep, "Train once per views-per-sample value")->delimiter(',');
  train->add_option("--steps", steps, "Override train.total_steps");

  auto* infer = app.add_subcommand("infer", "Predict pointmaps for a dataset");
  add_common(infer, infer_c);
  std::string infer_ckpt, infer_data;
  std::optional<std::size_t> infer_views;
  bool consecutive = false;
  infer->add_option("--checkpoint", infer_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--data", infer_data, "Dataset file")->required()->check(CLI::ExistingFile);
  infer->add_option("--views", infer_views, "Views per sample (default: all)");
  infer->add_flag("--consecutive-indices", consecutive, "Use slots 1..N instead of pool sampling");

  auto* pose = app.add_subcommand("eval-pose", "Recover cameras and score them");
  add_common(pose, pose_c);
  std::string pose_pred, pose_data;
  pose->add_option("--pred", pose_pred, "Prediction file")->required()->check(CLI::ExistingFile);
  pose->add_option("--data", pose_data, "Ground-truth dataset")->required()->check(CLI::ExistingFile);

  auto* recon = app.add_subcommand("eval-recon", "Score reconstructions");
  add_common(recon, recon_c);
  std::string recon_pred, recon_data;
  recon->add_option("--pred", recon_pred, "Prediction file")->required()->check(CLI::ExistingFile);
  recon->add_option("--data", recon_data, "Ground-truth dataset")->required()->check(CLI::ExistingFile);

  auto* bench = app.add_subcommand("benchmark", "Time forward passes over view counts");
  add_common(bench, bench_c);
  std::optional<std::string> bench_ckpt;
  std::vector<std::size_t> bench_views;
  bench->add_option("--checkpoint", bench_ckpt, "Model checkpoint (default: freshly initialised)")
      ->check(CLI::ExistingFile);
  bench->add_option("--views", bench_views, "View counts")->delimiter(',');

  auto* ply = app.add_subcommand("export-ply", "Write a colored point cloud");
  add_common(ply, ply_c);
  f3r::ExportOptions ply_opts;
  std::string ply_source = "global";
  std::string ply_name = "cloud.ply";
  auto* pred_opt = ply->add_option("--pred", ply_opts.predictions, "Prediction file")->check(CLI::ExistingFile);
  auto* data_opt = ply->add_option("--data", ply_opts.dataset, "Dataset file (exports ground truth)")
                       ->check(CLI::ExistingFile);
  pred_opt->excludes(data_opt);
  ply->add_option("--sample", ply_opts.sample, "Record index");
  ply->add_option("--source", ply_source, "Point source")->check(CLI::IsMember({"global", "local-aligned"}));
  ply->add_option("--min-confidence", ply_opts.min_confidence, "Raw confidence threshold");
  ply->add_option("--name", ply_name, "File name inside --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (backend == "scalar") f3r::kernels::set_backend(f3r::kernels::Backend::Scalar);
    if (backend == "avx2") {
      if (!f3r::kernels::avx2_available()) throw f3r::Error(f3r::ErrorKind::Config, "AVX2 is not available");
      f3r::kernels::set_backend(f3r::kernels::Backend::Avx2);
    }

    if (gen->parsed()) {
      f3r::RunConfig cfg = resolve(gen_c);
      if (n_scenes) cfg.data.n_scenes = *n_scenes;
      f3r::cmd_gen_data(cfg, gen_c.out, std::cout);
    } else if (train->parsed()) {
      f3r::RunConfig cfg = resolve(train_c);
      if (steps) cfg.train.total_steps = *steps;
      cfg.finalize();
      train_opts.out_dir = train_c.out;
      f3r::cmd_train(cfg, train_opts, std::cout);
    } else if (infer->parsed()) {
      f3r::RunConfig cfg = resolve(infer_c);
      if (infer_views) cfg.infer.views = *infer_views;
      if (consecutive) cfg.infer.pool_sampling = false;
      f3r::cmd_infer(cfg, infer_ckpt, infer_data, infer_c.out, std::cout);
    } else if (pose->parsed()) {
      f3r::cmd_eval_pose(resolve(pose_c), pose_pred, pose_data, pose_c.out, std::cout);
    } else if (recon->parsed()) {
      f3r::cmd_eval_recon(resolve(recon_c), recon_pred, recon_data, recon_c.out, std::cout);
    } else if (bench->parsed()) {
      f3r::RunConfig cfg = resolve(bench_c);
      if (!bench_views.empty()) cfg.benchmark.view_counts = bench_views;
      const auto rows = f3r::cmd_benchmark(cfg, bench_ckpt, bench_c.out, std::cout);
      for (const auto& r : rows) {
        if (r.status != "ok") {
          std::cerr << "benchmark row n_views=" << r.n_views << " failed: " << r.status << '\n';
        }
      }
    } else if (ply->parsed()) {
      if (ply_opts.predictions.empty() && ply_opts.dataset.empty()) {
        throw f3r::Error(f3r::ErrorKind::Config, "export-ply needs --pred or --data");
      }
      const f3r::RunConfig cfg = resolve(ply_c);
      ply_opts.source = ply_source == "local-aligned" ? f3r::CloudSource::LocalAligned : f3r::CloudSource::Global;
      ply_opts.out_path = (std::filesystem::path(ply_c.out) / ply_name).string();
      f3r::cmd_export_ply(cfg, ply_opts, std::cout);
    }
  } catch (const f3r::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return f3r::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: IoError: " << e.what() << '\n';
    return 4;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: OutOfMemory\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
