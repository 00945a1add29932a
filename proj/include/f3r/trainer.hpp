#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f3r/losses.hpp"
#include "f3r/model.hpp"
#include "f3r/synthgen.hpp"

namespace f3r {

struct TrainConfig {
  double base_lr = 1e-4;
  std::optional<std::size_t> warmup_steps;  // defaults to 5% of total_steps
  std::size_t total_steps = 1000;
  std::size_t batch_size = 1;
  std::size_t views_per_sample = 4;  // N
  std::uint32_t pool_size = 32;      // N'
  bool pool_sampling = true;         // false: slots 1..N every step
  LossConfig loss;
  std::uint64_t seed = 0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double grad_clip_norm = 1.0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t jobs = 1;

  std::size_t resolved_warmup() const;
  void validate() const;
};

template <typename T>
struct OptimState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static OptimState for_params(const ParameterStore<T>& params);
};

/// Linear warmup to base_lr, then half-cosine decay to 0 at total_steps.
double cosine_lr(std::size_t step, const TrainConfig& cfg);

/// Global L2 norm of all gradients, rescaled to max_norm when above it.
/// Returns the norm before clipping. Throws NonFiniteGradient.
template <typename T>
double clip_gradients(ParameterStore<T>& params, double max_norm);

/// Bias-corrected AdamW with decoupled weight decay on tensors flagged for
/// decay. Throws NonFiniteGradient.
template <typename T>
void adamw_step(ParameterStore<T>& params, OptimState<T>& state, double lr, const TrainConfig& cfg);

/// Views used by one training sample: view 0 followed by a sorted random
/// subset of the others.
std::vector<std::size_t> choose_training_views(std::size_t available, std::size_t wanted, std::mt19937_64& rng);

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_global = 0.0;
  double loss_local = 0.0;
};

std::string format_log_line(const StepRecord& r);

/// One optimiser update over samples batch[0..]; each sample draws its own
/// view subset and index assignment. Throws Diverged on a non-finite loss.
template <typename T>
StepRecord train_step(FusionModel<T>& model, OptimState<T>& state, std::span<const GroundTruthSample> batch,
                      const TrainConfig& cfg);

struct FitOptions {
  std::string out_dir;              // checkpoints and train.log; empty: nothing written
  std::optional<std::string> resume;  // checkpoint written by an earlier fit
};

struct FitResult {
  std::vector<StepRecord> log;  // rows produced by this call
  std::string final_checkpoint;
};

template <typename T>
FitResult fit(FusionModel<T>& model, std::span<const GroundTruthSample> dataset, const TrainConfig& cfg,
              const FitOptions& options = {});

/// Checkpoint path for a given step inside out_dir.
std::string checkpoint_path(const std::string& out_dir, std::uint64_t step);

extern template struct OptimState<float>;
extern template struct OptimState<double>;

}  // namespace f3r
