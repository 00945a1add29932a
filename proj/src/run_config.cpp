#include "f3r/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "f3r/error.hpp"

namespace f3r {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object, rejecting any key nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorKind::Config, path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw Error(ErrorKind::Config, "");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw Error(ErrorKind::Config, "");
        if constexpr (std::is_unsigned_v<T>) {
          if (!it->is_number_unsigned()) throw Error(ErrorKind::Config, "");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw Error(ErrorKind::Config, "");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw Error(ErrorKind::Config, path_ + "." + key + " has the wrong type");
    }
  }

  Section child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    static const json empty = json::object();
    return Section(it == j_.end() ? empty : *it, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw Error(ErrorKind::Config, "unknown key " + path_ + "." + it.key());
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

void read_precision(Section& s, Precision& p) {
  std::string name = p == Precision::Double ? "double" : "single";
  s.get("precision", name);
  if (name == "single" || name == "float32") {
    p = Precision::Single;
  } else if (name == "double" || name == "float64") {
    p = Precision::Double;
  } else {
    throw Error(ErrorKind::Config, "model.precision must be \"single\" or \"double\"");
  }
}

}  // namespace

void RunConfig::finalize() {
  if (deterministic) jobs = 1;
  if (jobs == 0) throw Error(ErrorKind::Config, "jobs must be >= 1");
  train.seed = seed;
  train.jobs = jobs;
  ransac.seed = seed;
  ransac.jobs = jobs;
  eval.align.jobs = jobs;
  data.render.scene.rng_seed = seed;
  if (data.render.height < 8 || data.render.width < 8) throw Error(ErrorKind::Config, "render size must be >= 8");
  if (data.render.views < 1) throw Error(ErrorKind::Config, "data.views must be >= 1");
  if (!(data.render.fov_deg > 0.0 && data.render.fov_deg < 180.0)) throw Error(ErrorKind::Config, "fov_deg out of range");
  if (data.render.scene.min_primitives < 1 || data.render.scene.min_primitives > data.render.scene.max_primitives) {
    throw Error(ErrorKind::Config, "primitive count range is invalid");
  }
  if (!(data.render.scene.extent > 0.0)) throw Error(ErrorKind::Config, "extent must be positive");
  if (benchmark.repeats < 1) throw Error(ErrorKind::Config, "benchmark.repeats must be >= 1");
  model.validate();
  train.validate();
  train.loss.validate();
  ransac.validate();
}

RunConfig parse_run_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Config, std::string("invalid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(root, "config");
  top.get("seed", c.seed);
  top.get("jobs", c.jobs);
  top.get("deterministic", c.deterministic);

  Section data = top.child("data");
  data.get("n_scenes", c.data.n_scenes);
  data.get("views", c.data.render.views);
  data.get("height", c.data.render.height);
  data.get("width", c.data.render.width);
  data.get("fov_deg", c.data.render.fov_deg);
  data.get("ring_radius", c.data.render.ring_radius);
  data.get("min_primitives", c.data.render.scene.min_primitives);
  data.get("max_primitives", c.data.render.scene.max_primitives);
  data.get("extent", c.data.render.scene.extent);
  data.get("table", c.data.render.scene.table);
  data.finish();

  Section model = top.child("model");
  model.get("patch_size", c.model.patch_size);
  model.get("embed_dim", c.model.embed_dim);
  model.get("fusion_layers", c.model.fusion_layers);
  model.get("attention_heads", c.model.attention_heads);
  model.get("mlp_ratio", c.model.mlp_ratio);
  model.get("head_hidden_dim", c.model.head_hidden_dim);
  model.get("pool_size", c.model.pool_size);
  model.get("max_train_views", c.model.max_train_views);
  read_precision(model, c.model.precision);
  model.finish();

  Section train = top.child("train");
  train.get("base_lr", c.train.base_lr);
  std::size_t warmup = 0;
  bool has_warmup = root.contains("train") && root["train"].is_object() && root["train"].contains("warmup_steps");
  train.get("warmup_steps", warmup);
  if (has_warmup) c.train.warmup_steps = warmup;
  train.get("total_steps", c.train.total_steps);
  train.get("batch_size", c.train.batch_size);
  train.get("views_per_sample", c.train.views_per_sample);
  train.get("pool_sampling", c.train.pool_sampling);
  train.get("weight_decay", c.train.weight_decay);
  train.get("beta1", c.train.beta1);
  train.get("beta2", c.train.beta2);
  train.get("eps", c.train.eps);
  train.get("grad_clip_norm", c.train.grad_clip_norm);
  train.get("checkpoint_every", c.train.checkpoint_every);
  train.finish();

  Section loss = top.child("loss");
  loss.get("alpha", c.train.loss.alpha);
  loss.get("confidence_reg_sign", c.train.loss.confidence_reg_sign);
  loss.finish();

  Section ransac = top.child("ransac");
  ransac.get("iterations", c.ransac.iterations);
  ransac.get("threshold_px", c.ransac.threshold_px);
  ransac.get("confidence_fraction", c.ransac.confidence_fraction);
  ransac.get("focal_candidate_count", c.ransac.focal_candidate_count);
  ransac.get("min_inliers", c.ransac.min_inliers);
  ransac.get("refine_iterations", c.ransac.refine_iterations);
  ransac.finish();

  Section infer = top.child("infer");
  infer.get("views", c.infer.views);
  infer.get("pool_sampling", c.infer.pool_sampling);
  infer.finish();

  Section eval = top.child("eval");
  eval.get("shared_camera", c.eval.shared_camera);
  eval.get("use_gt_mask", c.eval.use_gt_mask);
  eval.get("align_to_gt", c.eval.align_to_gt);
  eval.get("depth_median_scale", c.eval.depth_median_scale);
  eval.get("conf_weighting", c.eval.align.conf_weighting);
  eval.get("with_scale", c.eval.align.with_scale);
  eval.get("trim_rounds", c.eval.align.trim_rounds);
  eval.get("trim_factor", c.eval.align.trim_factor);
  eval.get("thresholds", c.eval.thresholds);
  eval.finish();

  Section bench = top.child("benchmark");
  bench.get("view_counts", c.benchmark.view_counts);
  bench.get("repeats", c.benchmark.repeats);
  bench.finish();

  top.finish();
  c.train.pool_size = c.model.pool_size;
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["deterministic"] = c.deterministic;
  const auto& r = c.data.render;
  j["data"] = {{"n_scenes", c.data.n_scenes},          {"views", r.views},
               {"height", r.height},                   {"width", r.width},
               {"fov_deg", r.fov_deg},                 {"ring_radius", r.ring_radius},
               {"min_primitives", r.scene.min_primitives}, {"max_primitives", r.scene.max_primitives},
               {"extent", r.scene.extent},             {"table", r.scene.table}};
  const auto& m = c.model;
  j["model"] = {{"patch_size", m.patch_size},
                {"embed_dim", m.embed_dim},
                {"fusion_layers", m.fusion_layers},
                {"attention_heads", m.attention_heads},
                {"mlp_ratio", m.mlp_ratio},
                {"head_hidden_dim", m.head_hidden_dim},
                {"pool_size", m.pool_size},
                {"max_train_views", m.max_train_views},
                {"precision", m.precision == Precision::Double ? "double" : "single"}};
  const auto& t = c.train;
  j["train"] = {{"base_lr", t.base_lr},
                {"total_steps", t.total_steps},
                {"batch_size", t.batch_size},
                {"views_per_sample", t.views_per_sample},
                {"pool_sampling", t.pool_sampling},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"grad_clip_norm", t.grad_clip_norm},
                {"checkpoint_every", t.checkpoint_every}};
  if (t.warmup_steps) j["train"]["warmup_steps"] = *t.warmup_steps;
  j["loss"] = {{"alpha", t.loss.alpha}, {"confidence_reg_sign", t.loss.confidence_reg_sign}};
  const auto& rc = c.ransac;
  j["ransac"] = {{"iterations", rc.iterations},
                 {"threshold_px", rc.threshold_px},
                 {"confidence_fraction", rc.confidence_fraction},
                 {"focal_candidate_count", rc.focal_candidate_count},
                 {"min_inliers", rc.min_inliers},
                 {"refine_iterations", rc.refine_iterations}};
  j["infer"] = {{"views", c.infer.views}, {"pool_sampling", c.infer.pool_sampling}};
  j["eval"] = {{"shared_camera", c.eval.shared_camera},
               {"use_gt_mask", c.eval.use_gt_mask},
               {"align_to_gt", c.eval.align_to_gt},
               {"depth_median_scale", c.eval.depth_median_scale},
               {"conf_weighting", c.eval.align.conf_weighting},
               {"with_scale", c.eval.align.with_scale},
               {"trim_rounds", c.eval.align.trim_rounds},
               {"trim_factor", c.eval.align.trim_factor},
               {"thresholds", c.eval.thresholds}};
  j["benchmark"] = {{"view_counts", c.benchmark.view_counts}, {"repeats", c.benchmark.repeats}};
  return j.dump(2);
}

}  // namespace f3r
