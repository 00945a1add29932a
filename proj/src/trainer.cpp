#include "f3r/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "f3r/error.hpp"

namespace f3r {

std::size_t TrainConfig::resolved_warmup() const {
  if (warmup_steps) return *warmup_steps;
  return static_cast<std::size_t>(std::llround(0.05 * static_cast<double>(total_steps)));
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw Error(ErrorKind::Config, "base_lr must be > 0");
  if (resolved_warmup() > total_steps) throw Error(ErrorKind::Config, "warmup_steps exceeds total_steps");
  if (batch_size < 1) throw Error(ErrorKind::Config, "batch_size must be >= 1");
  if (views_per_sample < 1) throw Error(ErrorKind::Config, "views_per_sample must be >= 1");
  if (views_per_sample > pool_size) throw Error(ErrorKind::Config, "views_per_sample exceeds pool_size");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::Config, "weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error(ErrorKind::Config, "betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw Error(ErrorKind::Config, "eps must be > 0");
  if (!(grad_clip_norm > 0.0)) throw Error(ErrorKind::Config, "grad_clip_norm must be > 0");
  loss.validate();
}

template <typename T>
OptimState<T> OptimState<T>::for_params(const ParameterStore<T>& params) {
  OptimState s;
  for (const auto& t : params.tensors()) {
    s.m.emplace_back(t.size(), T(0));
    s.v.emplace_back(t.size(), T(0));
  }
  return s;
}

double cosine_lr(std::size_t step, const TrainConfig& cfg) {
  const std::size_t warmup = cfg.resolved_warmup();
  const std::size_t total = cfg.total_steps;
  if (step >= total) return 0.0;
  if (step < warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double clip_gradients(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& t : params.tensors())
    for (T g : t.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorKind::NonFiniteGradient, "gradient norm is not finite");
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& t : params.tensors())
      for (T& g : t.grad) g = static_cast<T>(static_cast<double>(g) * scale);
  }
  return norm;
}

template <typename T>
void adamw_step(ParameterStore<T>& params, OptimState<T>& state, double lr, const TrainConfig& cfg) {
  auto& tensors = params.tensors();
  if (state.m.size() != tensors.size()) throw Error(ErrorKind::Shape, "optimizer state does not match parameters");
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    for (T g : tensors[k].grad)
      if (!std::isfinite(static_cast<double>(g))) {
        throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient in " + tensors[k].name);
      }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Tensor<T>& t = tensors[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != t.size()) throw Error(ErrorKind::Shape, "optimizer moment shape differs for " + t.name);
    const double decay = t.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = static_cast<double>(t.grad[i]);
      double theta = static_cast<double>(t.value[i]);
      theta -= decay * theta;
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      theta -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      t.value[i] = static_cast<T>(theta);
    }
  }
  params.bump_generation();
}

std::vector<std::size_t> choose_training_views(std::size_t available, std::size_t wanted, std::mt19937_64& rng) {
  if (available == 0) throw Error(ErrorKind::Shape, "sample has no views");
  const std::size_t n = std::min(available, wanted);
  std::vector<std::size_t> rest(available - 1);
  for (std::size_t i = 0; i < rest.size(); ++i) rest[i] = i + 1;
  // Partial Fisher-Yates over views 1..available-1.
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rest.size() - 1);
    std::swap(rest[i], rest[pick(rng)]);
  }
  rest.resize(n - 1);
  std::sort(rest.begin(), rest.end());
  std::vector<std::size_t> out{0};
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

std::string format_log_line(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%llu lr=%.17g loss_total=%.17g loss_global=%.17g loss_local=%.17g",
                static_cast<unsigned long long>(r.step), r.lr, r.loss_total, r.loss_global, r.loss_local);
  return buf;
}

namespace {

std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t z = seed ^ (0x9E3779B97F4A7C15ull * (step + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename T>
void scale_gradients(ParameterStore<T>& params, double s) {
  for (auto& t : params.tensors())
    for (T& g : t.grad) g = static_cast<T>(static_cast<double>(g) * s);
}

}  // namespace

template <typename T>
StepRecord train_step(FusionModel<T>& model, OptimState<T>& state, std::span<const GroundTruthSample> batch,
                      const TrainConfig& cfg) {
  if (batch.empty()) throw Error(ErrorKind::Shape, "empty training batch");
  std::mt19937_64 rng(step_seed(cfg.seed, state.step));
  model.params().zero_grad();
  StepRecord rec;
  rec.step = state.step + 1;
  rec.lr = cosine_lr(static_cast<std::size_t>(rec.step), cfg);
  ForwardOptions opts;
  opts.jobs = cfg.jobs;
  for (const auto& full : batch) {
    const auto order = choose_training_views(full.view_count(), cfg.views_per_sample, rng);
    const GroundTruthSample sample = order.size() == full.view_count() ? full : select_views(full, order);
    const IndexAssignment slots = cfg.pool_sampling
                                      ? sample_index_assignment(sample.view_count(), model.config().pool_size, rng)
                                      : consecutive_index_assignment(sample.view_count(), model.config().pool_size);
    Tape<T> tape;
    const PredictionBundle pred = model.forward(sample.images, slots, opts, &tape);
    const LossWithGradient lg = loss_gradients(pred, sample, cfg.loss);
    if (!std::isfinite(lg.report.total)) throw Error(ErrorKind::Diverged, "non-finite loss at step " + std::to_string(rec.step));
    model.backward(lg.grad, tape);
    rec.loss_total += lg.report.total;
    rec.loss_global += lg.report.global_sum();
    rec.loss_local += lg.report.local_sum();
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  rec.loss_total *= inv;
  rec.loss_global *= inv;
  rec.loss_local *= inv;
  if (batch.size() > 1) scale_gradients(model.params(), inv);
  clip_gradients(model.params(), cfg.grad_clip_norm);
  adamw_step(model.params(), state, rec.lr, cfg);
  return rec;
}

std::string checkpoint_path(const std::string& out_dir, std::uint64_t step) {
  return (std::filesystem::path(out_dir) / ("step_" + std::to_string(step) + ".f3rckpt")).string();
}

namespace {

template <typename T>
void save_training_checkpoint(const FusionModel<T>& model, const OptimState<T>& state, const std::string& path) {
  std::vector<StoredTensor> extra;
  StoredTensor step;
  step.name = "optim.step";
  step.dtype = 1;
  step.dims = {1};
  step.values = {static_cast<double>(state.step)};
  extra.push_back(std::move(step));
  const auto& tensors = model.params().tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    extra.push_back(to_stored<T>("optim.m." + tensors[k].name, tensors[k].shape, state.m[k]));
    extra.push_back(to_stored<T>("optim.v." + tensors[k].name, tensors[k].shape, state.v[k]));
  }
  save_params(model, path, extra);
}

template <typename T>
OptimState<T> restore_training_checkpoint(FusionModel<T>& model, const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  load_params(model, ckpt);
  OptimState<T> state = OptimState<T>::for_params(model.params());
  const StoredTensor* step = ckpt.find("optim.step");
  if (step == nullptr || step->values.size() != 1) throw Error(ErrorKind::Format, "checkpoint has no optimizer state");
  state.step = static_cast<std::uint64_t>(step->values[0]);
  const auto& tensors = model.params().tensors();
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const StoredTensor* m = ckpt.find("optim.m." + tensors[k].name);
    const StoredTensor* v = ckpt.find("optim.v." + tensors[k].name);
    if (m == nullptr || v == nullptr || m->values.size() != tensors[k].size() || v->values.size() != tensors[k].size()) {
      throw Error(ErrorKind::Format, "optimizer moments missing for " + tensors[k].name);
    }
    for (std::size_t i = 0; i < tensors[k].size(); ++i) {
      state.m[k][i] = static_cast<T>(m->values[i]);
      state.v[k][i] = static_cast<T>(v->values[i]);
    }
  }
  return state;
}

// Keeps log rows up to `step` so a resumed run rewrites the tail.
void truncate_log(const std::string& path, std::uint64_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    unsigned long long s = 0;
    if (std::sscanf(line.c_str(), "step=%llu", &s) == 1 && s <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

template <typename T>
FitResult fit(FusionModel<T>& model, std::span<const GroundTruthSample> dataset, const TrainConfig& cfg,
              const FitOptions& options) {
  cfg.validate();
  if (cfg.pool_size != model.config().pool_size) throw Error(ErrorKind::Config, "pool_size differs from the model's");
  if (dataset.empty() && cfg.total_steps > 0) throw Error(ErrorKind::Config, "training needs a non-empty dataset");

  OptimState<T> state = OptimState<T>::for_params(model.params());
  if (options.resume) state = restore_training_checkpoint(model, *options.resume);
  if (state.step > cfg.total_steps) throw Error(ErrorKind::Config, "resume checkpoint is past total_steps");

  const bool write = !options.out_dir.empty();
  std::ofstream log;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const std::string log_path = (std::filesystem::path(options.out_dir) / "train.log").string();
    if (options.resume) {
      truncate_log(log_path, state.step);
      log.open(log_path, std::ios::app);
    } else {
      log.open(log_path, std::ios::trunc);
    }
    if (!log) throw Error(ErrorKind::Io, "cannot open " + log_path);
  }

  FitResult result;
  std::vector<GroundTruthSample> batch;
  while (state.step < cfg.total_steps) {
    batch.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(dataset[(state.step * cfg.batch_size + b) % dataset.size()]);
    }
    const StepRecord rec = train_step(model, state, batch, cfg);
    result.log.push_back(rec);
    if (write) {
      log << format_log_line(rec) << '\n';
      log.flush();
      if (cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.total_steps) {
        save_training_checkpoint(model, state, checkpoint_path(options.out_dir, rec.step));
      }
    }
  }
  if (write) {
    result.final_checkpoint = checkpoint_path(options.out_dir, state.step);
    save_training_checkpoint(model, state, result.final_checkpoint);
    if (!log) throw Error(ErrorKind::Io, "failed writing the training log");
  }
  return result;
}

template struct OptimState<float>;
template struct OptimState<double>;
template double clip_gradients<float>(ParameterStore<float>&, double);
template double clip_gradients<double>(ParameterStore<double>&, double);
template void adamw_step<float>(ParameterStore<float>&, OptimState<float>&, double, const TrainConfig&);
template void adamw_step<double>(ParameterStore<double>&, OptimState<double>&, double, const TrainConfig&);
template StepRecord train_step<float>(FusionModel<float>&, OptimState<float>&, std::span<const GroundTruthSample>,
                                      const TrainConfig&);
template StepRecord train_step<double>(FusionModel<double>&, OptimState<double>&, std::span<const GroundTruthSample>,
                                       const TrainConfig&);
template FitResult fit<float>(FusionModel<float>&, std::span<const GroundTruthSample>, const TrainConfig&,
                              const FitOptions&);
template FitResult fit<double>(FusionModel<double>&, std::span<const GroundTruthSample>, const TrainConfig&,
                               const FitOptions&);

}  // namespace f3r
