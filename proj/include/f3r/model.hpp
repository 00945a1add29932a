#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "f3r/geometry.hpp"

namespace f3r {

enum class Precision : std::uint32_t { Single = 0, Double = 1 };

struct ModelConfig {
  std::uint32_t patch_size = 4;
  std::uint32_t embed_dim = 64;
  std::uint32_t fusion_layers = 4;
  std::uint32_t attention_heads = 4;
  double mlp_ratio = 2.0;
  std::uint32_t head_hidden_dim = 128;
  std::uint32_t pool_size = 32;  // N'
  std::uint32_t max_train_views = 4;
  Precision precision = Precision::Single;

  /// Throws Error(Config).
  void validate() const;
  std::size_t mlp_hidden_dim() const;
  std::size_t head_output_dim() const { return std::size_t{patch_size} * patch_size * 4; }
  std::size_t patch_input_dim() const { return std::size_t{patch_size} * patch_size * 3; }

  bool operator==(const ModelConfig&) const = default;
};

struct IndexAssignment {
  std::vector<std::uint32_t> indices;  // 1-based slots; indices[0] == 1

  std::size_t size() const { return indices.size(); }
  /// Throws Error(Shape) when not distinct / first != 1 / out of [1, pool].
  void validate(std::uint32_t pool_size) const;
};

/// First slot is always 1; the remaining n-1 are drawn uniformly without
/// replacement from {2, ..., pool_size}. Throws PoolTooSmall.
IndexAssignment sample_index_assignment(std::size_t n_views, std::uint32_t pool_size, std::mt19937_64& rng);
/// Slots 1..n in order (the naive scheme without pool sampling).
IndexAssignment consecutive_index_assignment(std::size_t n_views, std::uint32_t pool_size);

/// Fixed sinusoidal features of the raw slot index: pairs (sin, cos) over a
/// geometric frequency ladder from 1 down to 1 / pool_size.
std::vector<double> index_embedding(std::uint32_t index, std::size_t embed_dim, std::uint32_t pool_size);

/// Fixed 2-D sin/cos grid; rows of the result are tokens in raster order.
std::vector<double> patch_position_embedding(std::size_t grid_h, std::size_t grid_w, std::size_t embed_dim);

struct PredictionBundle {
  std::vector<Pointmap> local;
  std::vector<ConfidenceMap> local_conf;
  std::vector<Pointmap> global;
  std::vector<ConfidenceMap> global_conf;

  std::size_t view_count() const { return local.size(); }
};

/// dLoss with respect to each bundle field (raw confidences, before clamping).
struct BundleGradient {
  std::vector<std::vector<Vec3>> local;
  std::vector<std::vector<double>> local_conf;
  std::vector<std::vector<Vec3>> global;
  std::vector<std::vector<double>> global_conf;

  static BundleGradient zeros_like(const PredictionBundle& b);
};

template <typename T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool decay = true;  // receives decoupled weight decay

  std::size_t size() const { return value.size(); }
};

template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape, bool decay);

  Tensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Bumped whenever weights change so recorded tapes can be rejected.
  std::uint64_t generation() const { return generation_; }
  void bump_generation() { ++generation_; }

 private:
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::uint64_t generation_ = 0;
};

/// Activations recorded by a forward pass for the matching backward pass.
template <typename T>
struct Tape {
  struct Norm {
    std::vector<T> xhat;
    std::vector<T> rstd;
  };
  struct Block {
    std::vector<T> x_in;
    Norm ln1;
    std::vector<T> a;
    std::vector<T> qkv;
    std::vector<T> probs;  // heads x tokens x tokens
    std::vector<T> ctx;
    std::vector<T> x_mid;
    Norm ln2;
    std::vector<T> b;
    std::vector<T> hidden;
    std::vector<T> act;
  };
  struct Head {
    std::vector<T> hidden;
    std::vector<T> act;
    std::vector<T> out;
  };

  std::uint64_t generation = 0;
  std::size_t views = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool recorded = false;

  std::vector<T> patches;
  std::vector<T> e;
  Norm enc_ln;
  std::vector<T> enc_n;
  std::vector<T> enc_hidden;
  std::vector<T> enc_act;
  std::vector<Block> blocks;
  std::vector<T> x_last;
  Norm final_ln;
  std::vector<T> y;
  Head local_head;
  Head global_head;
};

struct ForwardOptions {
  std::size_t jobs = 1;  // worker threads for per-view head decoding
};

/// Per-image encoder, all-to-all fusion transformer and two decoding heads
/// (local and global) emitting XYZ plus a raw confidence per pixel.
template <typename T>
class FusionModel {
 public:
  explicit FusionModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  /// Truncated normal (sigma 0.02) projections, zero biases, unit norms, and
  /// zero-initialised residual output projections.
  void init(std::uint64_t seed);
  /// Every tensor drawn from N(0, stddev^2); used by gradient and symmetry checks.
  void randomize_all(std::uint64_t seed, double stddev);

  /// Token grid (HW/P^2 x embed_dim, row-major) for one image. Throws Shape.
  std::vector<T> patchify_encode(const float* image, std::size_t h, std::size_t w) const;

  /// Transformer stack over the concatenated tokens of all views; `tokens` is
  /// (n_tokens x embed_dim) and already carries the index embeddings.
  std::vector<T> fusion_forward(std::span<const T> tokens, std::size_t n_tokens) const;

  /// Both heads applied to fused tokens; grid_h * grid_w tokens per view.
  PredictionBundle decode_heads(std::span<const T> fused, std::size_t views, std::size_t h, std::size_t w,
                                const ForwardOptions& opts = {}) const;

  /// Single pass: encode, add index embeddings, fuse, decode. When `tape` is
  /// non-null the activations for backward() are recorded into it.
  PredictionBundle forward(const ImageSet& images, const IndexAssignment& assignment,
                           const ForwardOptions& opts = {}, Tape<T>* tape = nullptr) const;

  /// Accumulates dLoss/dparam into params().grad. Throws StaleTape.
  void backward(const BundleGradient& grad, const Tape<T>& tape);

 private:
  struct BlockIds {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  struct HeadIds {
    std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
  };

  void check_image_shape(std::size_t h, std::size_t w) const;
  std::vector<T> encode_tokens(const ImageSet& images, Tape<T>* tape) const;
  void fusion_impl(std::vector<T>& x, std::size_t n_tokens, Tape<T>* tape) const;
  void decode_into(const HeadIds& ids, std::span<const T> y, std::size_t views, std::size_t tokens_per_view,
                   std::size_t jobs, std::vector<T>& hidden, std::vector<T>& act, std::vector<T>& out) const;
  PredictionBundle assemble(const std::vector<T>& local_out, const std::vector<T>& global_out, std::size_t views,
                            std::size_t h, std::size_t w) const;

  ModelConfig config_;
  ParameterStore<T> params_;
  std::size_t patch_w_, patch_b_, enc_ln_g_, enc_ln_b_, enc_fc1_w_, enc_fc1_b_, enc_fc2_w_, enc_fc2_b_;
  std::vector<BlockIds> blocks_;
  std::size_t final_ln_g_, final_ln_b_;
  HeadIds local_head_, global_head_;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class FusionModel<float>;
extern template class FusionModel<double>;

inline constexpr char kCheckpointMagic[] = "F3RCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One tensor as stored on disk.
struct StoredTensor {
  std::string name;
  std::uint8_t dtype = 0;  // 0 = f32, 1 = f64
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // widened copy of the raw data
};

struct Checkpoint {
  ModelConfig config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
/// Throws Io / Format.
Checkpoint read_checkpoint(const std::string& path);

template <typename T>
StoredTensor to_stored(const std::string& name, std::span<const std::size_t> shape, std::span<const T> values);

/// Model weights plus optional extra tensors (e.g. optimizer moments).
template <typename T>
void save_params(const FusionModel<T>& model, const std::string& path, std::span<const StoredTensor> extra = {});
/// Throws ConfigMismatch when the stored config or tensor layout differs.
template <typename T>
void load_params(FusionModel<T>& model, const Checkpoint& ckpt);
template <typename T>
void load_params(FusionModel<T>& model, const std::string& path);

}  // namespace f3r
