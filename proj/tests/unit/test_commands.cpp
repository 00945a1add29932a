#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "f3r/artifacts.hpp"
#include "f3r/commands.hpp"
#include "f3r/error.hpp"
#include "f3r/run_config.hpp"
#include "test_util.hpp"

using namespace f3r;
using f3r::testing::random_vec;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("f3r_test_commands_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_config() {
  RunConfig c;
  c.seed = 3;
  c.data.n_scenes = 2;
  c.data.render.views = 3;
  c.data.render.height = 16;
  c.data.render.width = 16;
  c.model.embed_dim = 16;
  c.model.fusion_layers = 1;
  c.model.attention_heads = 2;
  c.model.head_hidden_dim = 16;
  c.model.pool_size = 8;
  c.infer.views = 3;
  c.benchmark.repeats = 1;
  c.finalize();
  return c;
}

}  // namespace

TEST_CASE("run config parses known keys and rejects unknown ones") {
  RunConfig c = parse_run_config(R"({"seed": 9, "deterministic": true, "jobs": 4,
                                            "train": {"base_lr": 0.002}, "eval": {"thresholds": [5, 10]}})");
  c.finalize();
  CHECK(c.seed == 9);
  CHECK(c.jobs == 1);
  CHECK(c.train.base_lr == doctest::Approx(0.002));
  CHECK(c.train.seed == 9);
  CHECK(c.eval.thresholds == std::vector<double>{5, 10});
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"bogus": 1})"), doctest::Contains("bogus"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"train": {"lr": 1}})"), doctest::Contains("ConfigError"), Error);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"seed": "x"})"), doctest::Contains("ConfigError"), Error);
  CHECK_THROWS_AS(parse_run_config("{not json"), Error);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"precision": "half"}})"), Error);
  CHECK_THROWS_WITH_AS(load_run_config("/nonexistent/f3r.json"), doctest::Contains("IoError"), Error);
}

TEST_CASE("run config dump round trips") {
  const RunConfig c = small_config();
  const RunConfig back = parse_run_config(dump_run_config(c));
  CHECK(dump_run_config(back) == dump_run_config(c));
  CHECK(back.model == c.model);
}

TEST_CASE("derive_seed is deterministic and spreads salts") {
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("ply round trip") {
  const fs::path dir = scratch("ply");
  std::mt19937_64 rng(1);
  for (std::size_t n : {std::size_t{1}, std::size_t{257}}) {
    ColoredCloud c;
    for (std::size_t i = 0; i < n; ++i) {
      c.points.push_back(random_vec(rng, 5.0));
      c.colors.push_back({static_cast<std::uint8_t>(i), static_cast<std::uint8_t>(2 * i), 255});
    }
    write_ply(c, (dir / "c.ply").string());
    const ColoredCloud back = read_ply((dir / "c.ply").string());
    REQUIRE(back.points.size() == n);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK((back.points[i] - c.points[i].cast<float>().cast<double>()).norm() == 0.0);
      CHECK(back.colors[i] == c.colors[i]);
    }
  }
  std::ofstream(dir / "bad.ply") << "ply\nformat ascii 1.0\nend_header\n";
  CHECK_THROWS_WITH_AS(read_ply((dir / "bad.ply").string()), doctest::Contains("FormatError"), Error);
}

TEST_CASE("prediction file round trip") {
  const fs::path dir = scratch("pred");
  RenderSettings rs;
  rs.views = 3;
  rs.height = 8;
  rs.width = 8;
  const GroundTruthSample gt = generate_sample(rs, 4);
  std::vector<PredictionRecord> recs{record_from_ground_truth(gt, 5)};
  recs[0].bundle.global_conf[1].set_raw(3, 1.25);
  write_predictions(recs, (dir / "p").string());
  const auto back = read_predictions((dir / "p").string());
  REQUIRE(back.size() == 1);
  CHECK(back[0].sample == 5);
  CHECK(back[0].views == recs[0].views);
  CHECK(back[0].slots.indices == recs[0].slots.indices);
  CHECK(back[0].images.pixels == recs[0].images.pixels);
  for (std::size_t v = 0; v < 3; ++v) {
    CHECK(back[0].bundle.global[v].valid == gt.global[v].valid);
    for (std::size_t i = 0; i < gt.global[v].size(); ++i)
      CHECK((back[0].bundle.global[v].points[i] - gt.global[v].points[i].cast<float>().cast<double>()).norm() == 0.0);
  }
  CHECK(back[0].bundle.global_conf[1].raw(3) == 1.25);
  write_predictions(back, (dir / "q").string());
  std::ifstream a(dir / "p", std::ios::binary), b(dir / "q", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
  std::ofstream(dir / "bad") << "NOTAPRED";
  CHECK_THROWS_WITH_AS(read_predictions((dir / "bad").string()), doctest::Contains("FormatError"), Error);
}

TEST_CASE("reconstruction evaluation of ground truth is exact") {
  const RunConfig c = small_config();
  std::vector<GroundTruthSample> data;
  std::vector<PredictionRecord> recs;
  for (std::uint32_t s = 0; s < 2; ++s) {
    data.push_back(generate_sample(c.data.render, derive_seed(1, s)));
    recs.push_back(record_from_ground_truth(data.back(), s));
  }
  const MetricReport r = evaluate_reconstruction(c, recs, data, "");
  CHECK(*r.find("acc_global") == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(*r.find("comp_global") == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::abs(*r.find("acc_delta")) < 1e-9);
  CHECK(*r.find("depth_rel") < 1e-9);
  CHECK(*r.find("depth_tau") == doctest::Approx(100.0));
}

TEST_CASE("aligned local pointmaps beat a noisy global head") {
  const RunConfig c = small_config();
  std::vector<GroundTruthSample> data{generate_sample(c.data.render, 11)};
  std::vector<PredictionRecord> recs{record_from_ground_truth(data[0], 0)};
  std::mt19937_64 rng(12);
  for (auto& pm : recs[0].bundle.global)
    for (auto& p : pm.points) p += random_vec(rng, 0.05);
  const MetricReport r = evaluate_reconstruction(c, recs, data, "");
  CHECK(*r.find("acc_local_aligned") < *r.find("acc_global"));
  CHECK(*r.find("acc_delta") == doctest::Approx(*r.find("acc_local_aligned") - *r.find("acc_global")));
}

TEST_CASE("pose evaluation needs two views") {
  RunConfig c = small_config();
  RenderSettings rs = c.data.render;
  rs.views = 1;
  std::vector<GroundTruthSample> data{generate_sample(rs, 2)};
  std::vector<PredictionRecord> recs{record_from_ground_truth(data[0], 0)};
  CHECK_THROWS_WITH_AS(evaluate_poses(c, recs, data, ""), doctest::Contains("TooFewViews"), Error);
  CHECK_THROWS_AS(evaluate_poses(c, {}, data, ""), Error);
}

TEST_CASE("end to end commands on a tiny run") {
  const fs::path dir = scratch("e2e");
  RunConfig c = small_config();
  c.train.total_steps = 3;
  c.train.views_per_sample = 3;
  c.model.max_train_views = 3;
  c.finalize();
  std::ostringstream log;
  const GenDataSummary g = cmd_gen_data(c, (dir / "data").string(), log);
  CHECK(g.samples == 2);
  TrainOptions to;
  to.dataset = g.path;
  to.out_dir = (dir / "train").string();
  const auto runs = cmd_train(c, to, log);
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].fit.log.size() == 3);
  const std::string ckpt = (dir / "train" / "step_3.f3rckpt").string();
  REQUIRE(fs::exists(ckpt));
  const auto recs = cmd_infer(c, ckpt, g.path, (dir / "infer").string(), log);
  CHECK(recs.size() == 2);
  const std::string pred = (dir / "infer" / kPredictionFile).string();
  const MetricReport pose = cmd_eval_pose(c, pred, g.path, (dir / "pose").string(), log);
  CHECK(pose.find("rra@15").has_value());
  CHECK(fs::exists(dir / "pose" / kPoseMetricsFile));
  const MetricReport recon = cmd_eval_recon(c, pred, g.path, (dir / "recon").string(), log);
  CHECK(std::isfinite(*recon.find("acc_global")));
  CHECK(MetricReport::read((dir / "recon" / kReconMetricsFile).string()).entries() == recon.entries());

  ExportOptions eo;
  eo.predictions = pred;
  eo.dataset = g.path;
  eo.out_path = (dir / "cloud.ply").string();
  const std::size_t n = cmd_export_ply(c, eo, log);
  CHECK(n > 0);
  CHECK(read_ply(eo.out_path).points.size() == n);

  eo.min_confidence = 1e9;
  CHECK_THROWS_WITH_AS(cmd_export_ply(c, eo, log), doctest::Contains("EmptyCloud"), Error);

  TrainOptions sweep = to;
  sweep.resume = ckpt;
  sweep.views_sweep = {2, 3};
  CHECK_THROWS_WITH_AS(cmd_train(c, sweep, log), doctest::Contains("ConfigError"), Error);
}

TEST_CASE("benchmark rows are sorted with exact token counts") {
  const fs::path dir = scratch("bench");
  RunConfig c = small_config();
  c.benchmark.view_counts = {4, 1, 9};
  std::ostringstream log;
  const auto rows = cmd_benchmark(c, std::nullopt, dir.string(), log);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].n_views == 1);
  CHECK(rows[1].n_views == 4);
  CHECK(rows[2].n_views == 9);
  for (const auto& r : rows) CHECK(r.tokens == r.n_views * 16 * 16 / 16);
  CHECK(rows[0].status == "ok");
  CHECK(rows[2].status == "PoolTooSmall");
  CHECK(fs::exists(dir / kBenchmarkFile));
}
