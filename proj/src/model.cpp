#include "f3r/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "f3r/error.hpp"
#include "f3r/kernels.hpp"
#include "f3r/parallel.hpp"

namespace f3r {

// ---------------------------------------------------------------------------
// Configuration and index handling

void ModelConfig::validate() const {
  if (patch_size == 0 || embed_dim == 0 || attention_heads == 0 || head_hidden_dim == 0) {
    throw Error(ErrorKind::Config, "model dimensions must be positive");
  }
  if (embed_dim % attention_heads != 0) {
    throw Error(ErrorKind::Config, "embed_dim must be divisible by attention_heads");
  }
  if (!(mlp_ratio > 0.0) || mlp_hidden_dim() == 0) throw Error(ErrorKind::Config, "mlp_ratio must be positive");
  if (pool_size < 1 || pool_size < max_train_views) {
    throw Error(ErrorKind::Config, "pool_size must be >= max_train_views");
  }
}

std::size_t ModelConfig::mlp_hidden_dim() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void IndexAssignment::validate(std::uint32_t pool_size) const {
  if (indices.empty()) throw Error(ErrorKind::Shape, "empty index assignment");
  if (indices.front() != 1) throw Error(ErrorKind::Shape, "first view must carry index 1");
  std::vector<std::uint32_t> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorKind::Shape, "index assignment has duplicates");
  }
  if (sorted.front() < 1 || sorted.back() > pool_size) {
    throw Error(ErrorKind::PoolTooSmall, "index outside [1, pool_size]");
  }
}

IndexAssignment sample_index_assignment(std::size_t n_views, std::uint32_t pool_size, std::mt19937_64& rng) {
  if (n_views == 0) throw Error(ErrorKind::Shape, "need at least one view");
  if (n_views > pool_size) {
    throw Error(ErrorKind::PoolTooSmall,
                std::to_string(n_views) + " views exceed index pool of " + std::to_string(pool_size));
  }
  std::vector<std::uint32_t> rest(pool_size - 1);
  std::iota(rest.begin(), rest.end(), 2u);
  IndexAssignment out;
  out.indices.reserve(n_views);
  out.indices.push_back(1);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i + 1 < n_views; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rest.size() - 1);
    std::swap(rest[i], rest[pick(rng)]);
    out.indices.push_back(rest[i]);
  }
  return out;
}

IndexAssignment consecutive_index_assignment(std::size_t n_views, std::uint32_t pool_size) {
  if (n_views > pool_size) {
    throw Error(ErrorKind::PoolTooSmall,
                std::to_string(n_views) + " views exceed index pool of " + std::to_string(pool_size));
  }
  IndexAssignment out;
  out.indices.resize(n_views);
  std::iota(out.indices.begin(), out.indices.end(), 1u);
  return out;
}

std::vector<double> index_embedding(std::uint32_t index, std::size_t embed_dim, std::uint32_t pool_size) {
  std::vector<double> out(embed_dim, 0.0);
  const std::size_t pairs = embed_dim / 2;
  const double lowest = 1.0 / static_cast<double>(std::max<std::uint32_t>(pool_size, 1));
  for (std::size_t k = 0; k < pairs; ++k) {
    const double frac = pairs > 1 ? static_cast<double>(k) / static_cast<double>(pairs - 1) : 0.0;
    const double freq = std::pow(lowest, frac);
    const double phase = static_cast<double>(index) * freq;
    out[2 * k] = std::sin(phase);
    out[2 * k + 1] = std::cos(phase);
  }
  return out;
}

namespace {

// 1-D sin/cos features of `pos` written to out[0..dim).
void sincos_1d(double pos, std::size_t dim, double* out) {
  const std::size_t pairs = dim / 2;
  for (std::size_t k = 0; k < pairs; ++k) {
    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(pairs));
    out[k] = std::sin(pos * omega);
    out[pairs + k] = std::cos(pos * omega);
  }
  if (dim % 2 == 1) out[dim - 1] = 0.0;
}

}  // namespace

std::vector<double> patch_position_embedding(std::size_t grid_h, std::size_t grid_w, std::size_t embed_dim) {
  std::vector<double> out(grid_h * grid_w * embed_dim, 0.0);
  const std::size_t row_dim = embed_dim / 2;
  const std::size_t col_dim = embed_dim - row_dim;
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      double* dst = out.data() + (r * grid_w + c) * embed_dim;
      sincos_1d(static_cast<double>(r), row_dim, dst);
      sincos_1d(static_cast<double>(c), col_dim, dst + row_dim);
    }
  }
  return out;
}

BundleGradient BundleGradient::zeros_like(const PredictionBundle& b) {
  BundleGradient g;
  for (std::size_t v = 0; v < b.view_count(); ++v) {
    g.local.emplace_back(b.local[v].size(), Vec3::Zero());
    g.global.emplace_back(b.global[v].size(), Vec3::Zero());
    g.local_conf.emplace_back(b.local_conf[v].size(), 0.0);
    g.global_conf.emplace_back(b.global_conf[v].size(), 0.0);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Parameter store

template <typename T>
std::size_t ParameterStore<T>::add(std::string name, std::vector<std::size_t> shape, bool decay) {
  if (by_name_.count(name)) throw Error(ErrorKind::Config, "duplicate parameter " + name);
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  Tensor<T> t;
  t.name = name;
  t.shape = std::move(shape);
  t.value.assign(n, T(0));
  t.grad.assign(n, T(0));
  t.decay = decay;
  by_name_.emplace(std::move(name), tensors_.size());
  tensors_.push_back(std::move(t));
  return tensors_.size() - 1;
}

template <typename T>
Tensor<T>& ParameterStore<T>::get(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw Error(ErrorKind::ConfigMismatch, "no parameter named " + name);
  return tensors_[it->second];
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw Error(ErrorKind::ConfigMismatch, "no parameter named " + name);
  return tensors_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), T(0));
}

template class ParameterStore<float>;
template class ParameterStore<double>;

// ---------------------------------------------------------------------------
// Layer primitives

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
void linear(const T* x, std::size_t rows, const Tensor<T>& w, const Tensor<T>& b, T* y) {
  const std::size_t out = w.shape[0];
  const std::size_t in = w.shape[1];
  kernels::gemm_nt(rows, out, in, x, w.value.data(), y, false);
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] += b.value[o];
  }
}

// Accumulates weight/bias gradients; writes (or adds) dx when non-null.
template <typename T>
void linear_backward(const T* dy, const T* x, std::size_t rows, Tensor<T>& w, Tensor<T>& b, T* dx,
                     bool accumulate_dx) {
  const std::size_t out = w.shape[0];
  const std::size_t in = w.shape[1];
  kernels::gemm_tn(out, in, rows, dy, x, w.grad.data(), true);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * out;
    for (std::size_t o = 0; o < out; ++o) b.grad[o] += dyr[o];
  }
  if (dx != nullptr) kernels::gemm_nn(rows, in, out, dy, w.value.data(), dx, accumulate_dx);
}

template <typename T>
void layer_norm(const T* x, std::size_t rows, std::size_t d, const Tensor<T>& g, const Tensor<T>& b, T* y,
                T* xhat, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + kLayerNormEps));
    rstd[r] = rs;
    T* hr = xhat + r * d;
    T* yr = y + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      hr[i] = static_cast<T>(xr[i] - mean) * rs;
      yr[i] = hr[i] * g.value[i] + b.value[i];
    }
  }
}

template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, std::size_t rows, std::size_t d, Tensor<T>& g,
                         Tensor<T>& b, T* dx, bool accumulate_dx) {
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * d;
    const T* hr = xhat + r * d;
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
      g.grad[i] += dyr[i] * hr[i];
      b.grad[i] += dyr[i];
      dxhat[i] = dyr[i] * g.value[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * hr[i];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    T* dxr = dx + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      const T v = rstd[r] * (dxhat[i] - mean_dxhat - hr[i] * mean_dxhat_xhat);
      dxr[i] = accumulate_dx ? dxr[i] + v : v;
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <typename T>
void gelu(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T th = std::tanh(static_cast<T>(kGeluC) * (v + static_cast<T>(0.044715) * v * v * v));
    y[i] = static_cast<T>(0.5) * v * (static_cast<T>(1) + th);
  }
}

// dx = dy * gelu'(x), in place on dy.
template <typename T>
void gelu_backward(const T* x, T* dy, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T inner = static_cast<T>(kGeluC) * (v + static_cast<T>(0.044715) * v * v * v);
    const T th = std::tanh(inner);
    const T dinner = static_cast<T>(kGeluC) * (static_cast<T>(1) + static_cast<T>(3 * 0.044715) * v * v);
    const T deriv = static_cast<T>(0.5) * (static_cast<T>(1) + th) +
                    static_cast<T>(0.5) * v * (static_cast<T>(1) - th * th) * dinner;
    dy[i] *= deriv;
  }
}

template <typename T>
void gather_head(const T* qkv, std::size_t tokens, std::size_t d, std::size_t offset, std::size_t dh, T* out) {
  for (std::size_t t = 0; t < tokens; ++t) std::copy_n(qkv + t * 3 * d + offset, dh, out + t * dh);
}

template <typename T>
void scatter_head(const T* in, std::size_t tokens, std::size_t stride, std::size_t offset, std::size_t dh, T* dst) {
  for (std::size_t t = 0; t < tokens; ++t) std::copy_n(in + t * dh, dh, dst + t * stride + offset);
}

template <typename T>
void softmax_rows(T* s, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = s + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const T inv = static_cast<T>(1) / sum;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

// Multi-head self-attention over every token; `probs` receives
// heads x tokens x tokens when non-null.
template <typename T>
void attention_forward(const T* qkv, std::size_t tokens, std::size_t d, std::size_t heads, T* ctx, T* probs) {
  const std::size_t dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> q(tokens * dh), k(tokens * dh), v(tokens * dh), o(tokens * dh);
  std::vector<T> scratch(probs == nullptr ? tokens * tokens : 0);
  for (std::size_t h = 0; h < heads; ++h) {
    gather_head(qkv, tokens, d, h * dh, dh, q.data());
    gather_head(qkv, tokens, d, d + h * dh, dh, k.data());
    gather_head(qkv, tokens, d, 2 * d + h * dh, dh, v.data());
    T* s = probs != nullptr ? probs + h * tokens * tokens : scratch.data();
    kernels::gemm_nt(tokens, tokens, dh, q.data(), k.data(), s, false);
    for (std::size_t i = 0; i < tokens * tokens; ++i) s[i] *= scale;
    softmax_rows(s, tokens, tokens);
    kernels::gemm_nn(tokens, dh, tokens, s, v.data(), o.data(), false);
    scatter_head(o.data(), tokens, d, h * dh, dh, ctx);
  }
}

template <typename T>
void attention_backward(const T* qkv, const T* probs, const T* dctx, std::size_t tokens, std::size_t d,
                        std::size_t heads, T* dqkv) {
  const std::size_t dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> q(tokens * dh), k(tokens * dh), v(tokens * dh), dout(tokens * dh);
  std::vector<T> dq(tokens * dh), dk(tokens * dh), dv(tokens * dh);
  std::vector<T> ds(tokens * tokens);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* p = probs + h * tokens * tokens;
    gather_head(qkv, tokens, d, h * dh, dh, q.data());
    gather_head(qkv, tokens, d, d + h * dh, dh, k.data());
    gather_head(qkv, tokens, d, 2 * d + h * dh, dh, v.data());
    for (std::size_t t = 0; t < tokens; ++t) std::copy_n(dctx + t * d + h * dh, dh, dout.data() + t * dh);

    kernels::gemm_nt(tokens, tokens, dh, dout.data(), v.data(), ds.data(), false);  // dP
    kernels::gemm_tn(tokens, dh, tokens, p, dout.data(), dv.data(), false);
    for (std::size_t r = 0; r < tokens; ++r) {
      const T* pr = p + r * tokens;
      T* dr = ds.data() + r * tokens;
      const T inner = kernels::dot(pr, dr, tokens);
      for (std::size_t c = 0; c < tokens; ++c) dr[c] = pr[c] * (dr[c] - inner) * scale;
    }
    kernels::gemm_nn(tokens, dh, tokens, ds.data(), k.data(), dq.data(), false);
    kernels::gemm_tn(tokens, dh, tokens, ds.data(), q.data(), dk.data(), false);
    scatter_head(dq.data(), tokens, 3 * d, h * dh, dh, dqkv);
    scatter_head(dk.data(), tokens, 3 * d, d + h * dh, dh, dqkv);
    scatter_head(dv.data(), tokens, 3 * d, 2 * d + h * dh, dh, dqkv);
  }
}

template <typename T>
void fill_truncated_normal(std::vector<T>& v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  for (T& x : v) {
    double s;
    do {
      s = n(rng);
    } while (std::abs(s) > 2.0 * stddev);
    x = static_cast<T>(s);
  }
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

template <typename T>
FusionModel<T>::FusionModel(ModelConfig config) : config_(config) {
  config_.precision = std::is_same_v<T, float> ? Precision::Single : Precision::Double;
  config_.validate();
  const std::size_t d = config_.embed_dim;
  const std::size_t dm = config_.mlp_hidden_dim();
  const std::size_t hh = config_.head_hidden_dim;
  const std::size_t ho = config_.head_output_dim();

  patch_w_ = params_.add("encoder.patch.weight", {d, config_.patch_input_dim()}, true);
  patch_b_ = params_.add("encoder.patch.bias", {d}, false);
  enc_ln_g_ = params_.add("encoder.norm.weight", {d}, false);
  enc_ln_b_ = params_.add("encoder.norm.bias", {d}, false);
  enc_fc1_w_ = params_.add("encoder.mlp.fc1.weight", {dm, d}, true);
  enc_fc1_b_ = params_.add("encoder.mlp.fc1.bias", {dm}, false);
  enc_fc2_w_ = params_.add("encoder.mlp.fc2.weight", {d, dm}, true);
  enc_fc2_b_ = params_.add("encoder.mlp.fc2.bias", {d}, false);
  for (std::uint32_t l = 0; l < config_.fusion_layers; ++l) {
    const std::string p = "fusion.blocks." + std::to_string(l) + ".";
    BlockIds ids{};
    ids.ln1_g = params_.add(p + "norm1.weight", {d}, false);
    ids.ln1_b = params_.add(p + "norm1.bias", {d}, false);
    ids.qkv_w = params_.add(p + "attn.qkv.weight", {3 * d, d}, true);
    ids.qkv_b = params_.add(p + "attn.qkv.bias", {3 * d}, false);
    ids.proj_w = params_.add(p + "attn.proj.weight", {d, d}, true);
    ids.proj_b = params_.add(p + "attn.proj.bias", {d}, false);
    ids.ln2_g = params_.add(p + "norm2.weight", {d}, false);
    ids.ln2_b = params_.add(p + "norm2.bias", {d}, false);
    ids.fc1_w = params_.add(p + "mlp.fc1.weight", {dm, d}, true);
    ids.fc1_b = params_.add(p + "mlp.fc1.bias", {dm}, false);
    ids.fc2_w = params_.add(p + "mlp.fc2.weight", {d, dm}, true);
    ids.fc2_b = params_.add(p + "mlp.fc2.bias", {d}, false);
    blocks_.push_back(ids);
  }
  final_ln_g_ = params_.add("fusion.norm.weight", {d}, false);
  final_ln_b_ = params_.add("fusion.norm.bias", {d}, false);
  for (auto [prefix, ids] : {std::pair{"head_local.", &local_head_}, std::pair{"head_global.", &global_head_}}) {
    const std::string p = prefix;
    ids->fc1_w = params_.add(p + "fc1.weight", {hh, d}, true);
    ids->fc1_b = params_.add(p + "fc1.bias", {hh}, false);
    ids->fc2_w = params_.add(p + "fc2.weight", {ho, hh}, true);
    ids->fc2_b = params_.add(p + "fc2.bias", {ho}, false);
  }
  init(0);
}

template <typename T>
void FusionModel<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& t : params_.tensors()) {
    const bool is_norm_gain = t.name.find("norm") != std::string::npos && t.name.ends_with(".weight");
    const bool is_zero_init = t.name.ends_with("attn.proj.weight") ||
                              (t.name.starts_with("fusion.blocks.") && t.name.ends_with("mlp.fc2.weight"));
    if (is_norm_gain) {
      std::fill(t.value.begin(), t.value.end(), T(1));
    } else if (t.shape.size() == 2 && !is_zero_init) {
      fill_truncated_normal(t.value, 0.02, rng);
    } else {
      std::fill(t.value.begin(), t.value.end(), T(0));
    }
  }
  params_.zero_grad();
  params_.bump_generation();
}

template <typename T>
void FusionModel<T>::randomize_all(std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& t : params_.tensors()) {
    const bool is_norm_gain = t.name.find("norm") != std::string::npos && t.name.ends_with(".weight");
    for (T& x : t.value) x = static_cast<T>(is_norm_gain ? 1.0 + n(rng) : n(rng));
  }
  params_.zero_grad();
  params_.bump_generation();
}

template <typename T>
void FusionModel<T>::check_image_shape(std::size_t h, std::size_t w) const {
  const std::size_t p = config_.patch_size;
  if (h == 0 || w == 0 || h % p != 0 || w % p != 0) {
    throw Error(ErrorKind::Shape, "image " + std::to_string(h) + "x" + std::to_string(w) +
                                      " not divisible by patch size " + std::to_string(p));
  }
}

template <typename T>
std::vector<T> FusionModel<T>::encode_tokens(const ImageSet& images, Tape<T>* tape) const {
  const std::size_t p = config_.patch_size;
  const std::size_t h = images.height;
  const std::size_t w = images.width;
  check_image_shape(h, w);
  const std::size_t gh = h / p;
  const std::size_t gw = w / p;
  const std::size_t per_view = gh * gw;
  const std::size_t tokens = images.count * per_view;
  const std::size_t d = config_.embed_dim;
  const std::size_t pin = config_.patch_input_dim();
  const std::size_t dm = config_.mlp_hidden_dim();

  std::vector<T> patches(tokens * pin);
  for (std::size_t v = 0; v < images.count; ++v) {
    const float* img = images.view(v);
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        T* dst = patches.data() + ((v * per_view) + py * gw + px) * pin;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t c = 0; c < 3; ++c)
              dst[(dy * p + dx) * 3 + c] = static_cast<T>(img[((py * p + dy) * w + px * p + dx) * 3 + c]);
      }
  }

  std::vector<T> e(tokens * d);
  linear(patches.data(), tokens, params_[patch_w_], params_[patch_b_], e.data());
  const std::vector<double> pos = patch_position_embedding(gh, gw, d);
  for (std::size_t t = 0; t < tokens; ++t) {
    const double* pr = pos.data() + (t % per_view) * d;
    for (std::size_t i = 0; i < d; ++i) e[t * d + i] += static_cast<T>(pr[i]);
  }

  std::vector<T> n0(tokens * d), xhat(tokens * d), rstd(tokens);
  layer_norm(e.data(), tokens, d, params_[enc_ln_g_], params_[enc_ln_b_], n0.data(), xhat.data(), rstd.data());
  std::vector<T> hidden(tokens * dm), act(tokens * dm);
  linear(n0.data(), tokens, params_[enc_fc1_w_], params_[enc_fc1_b_], hidden.data());
  gelu(hidden.data(), act.data(), hidden.size());
  std::vector<T> enc(tokens * d);
  linear(act.data(), tokens, params_[enc_fc2_w_], params_[enc_fc2_b_], enc.data());
  for (std::size_t i = 0; i < enc.size(); ++i) enc[i] += e[i];

  if (tape != nullptr) {
    tape->patches = std::move(patches);
    tape->e = std::move(e);
    tape->enc_ln = {std::move(xhat), std::move(rstd)};
    tape->enc_n = std::move(n0);
    tape->enc_hidden = std::move(hidden);
    tape->enc_act = std::move(act);
  }
  return enc;
}

template <typename T>
std::vector<T> FusionModel<T>::patchify_encode(const float* image, std::size_t h, std::size_t w) const {
  check_image_shape(h, w);
  ImageSet one(1, h, w);
  std::copy_n(image, one.view_stride(), one.pixels.data());
  return encode_tokens(one, nullptr);
}

template <typename T>
void FusionModel<T>::fusion_impl(std::vector<T>& x, std::size_t n_tokens, Tape<T>* tape) const {
  const std::size_t d = config_.embed_dim;
  const std::size_t dm = config_.mlp_hidden_dim();
  const std::size_t heads = config_.attention_heads;
  if (x.size() != n_tokens * d) throw Error(ErrorKind::Shape, "token buffer does not match token count");
  std::vector<T> a(n_tokens * d), xhat(n_tokens * d), rstd(n_tokens), qkv(n_tokens * 3 * d), ctx(n_tokens * d),
      out(n_tokens * d), hidden(n_tokens * dm), act(n_tokens * dm);
  if (tape != nullptr) tape->blocks.assign(blocks_.size(), {});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const BlockIds& ids = blocks_[l];
    typename Tape<T>::Block* rec = tape != nullptr ? &tape->blocks[l] : nullptr;
    if (rec != nullptr) rec->x_in = x;

    layer_norm(x.data(), n_tokens, d, params_[ids.ln1_g], params_[ids.ln1_b], a.data(), xhat.data(), rstd.data());
    linear(a.data(), n_tokens, params_[ids.qkv_w], params_[ids.qkv_b], qkv.data());
    T* probs = nullptr;
    if (rec != nullptr) {
      rec->probs.resize(heads * n_tokens * n_tokens);
      probs = rec->probs.data();
    }
    attention_forward(qkv.data(), n_tokens, d, heads, ctx.data(), probs);
    linear(ctx.data(), n_tokens, params_[ids.proj_w], params_[ids.proj_b], out.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
    if (rec != nullptr) {
      rec->ln1 = {xhat, rstd};
      rec->a = a;
      rec->qkv = qkv;
      rec->ctx = ctx;
      rec->x_mid = x;
    }

    layer_norm(x.data(), n_tokens, d, params_[ids.ln2_g], params_[ids.ln2_b], a.data(), xhat.data(), rstd.data());
    linear(a.data(), n_tokens, params_[ids.fc1_w], params_[ids.fc1_b], hidden.data());
    gelu(hidden.data(), act.data(), hidden.size());
    linear(act.data(), n_tokens, params_[ids.fc2_w], params_[ids.fc2_b], out.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
    if (rec != nullptr) {
      rec->ln2 = {xhat, rstd};
      rec->b = a;
      rec->hidden = hidden;
      rec->act = act;
    }
  }
  if (tape != nullptr) tape->x_last = x;
  std::vector<T> y(n_tokens * d);
  layer_norm(x.data(), n_tokens, d, params_[final_ln_g_], params_[final_ln_b_], y.data(), xhat.data(), rstd.data());
  if (tape != nullptr) tape->final_ln = {std::move(xhat), std::move(rstd)};
  if (!all_finite(y)) throw Error(ErrorKind::NonFiniteActivation, "fusion transformer produced non-finite values");
  x = std::move(y);
}

template <typename T>
std::vector<T> FusionModel<T>::fusion_forward(std::span<const T> tokens, std::size_t n_tokens) const {
  std::vector<T> x(tokens.begin(), tokens.end());
  fusion_impl(x, n_tokens, nullptr);
  return x;
}

template <typename T>
void FusionModel<T>::decode_into(const HeadIds& ids, std::span<const T> y, std::size_t views,
                                 std::size_t tokens_per_view, std::size_t jobs, std::vector<T>& hidden,
                                 std::vector<T>& act, std::vector<T>& out) const {
  const std::size_t d = config_.embed_dim;
  const std::size_t hh = config_.head_hidden_dim;
  const std::size_t ho = config_.head_output_dim();
  const std::size_t tokens = views * tokens_per_view;
  hidden.resize(tokens * hh);
  act.resize(tokens * hh);
  out.resize(tokens * ho);
  // Each view decodes its own token rows into disjoint output slices.
  parallel_for(views, jobs, [&](std::size_t v) {
    const std::size_t t0 = v * tokens_per_view;
    T* hv = hidden.data() + t0 * hh;
    T* av = act.data() + t0 * hh;
    linear(y.data() + t0 * d, tokens_per_view, params_[ids.fc1_w], params_[ids.fc1_b], hv);
    gelu(hv, av, tokens_per_view * hh);
    linear(av, tokens_per_view, params_[ids.fc2_w], params_[ids.fc2_b], out.data() + t0 * ho);
  });
}

template <typename T>
PredictionBundle FusionModel<T>::assemble(const std::vector<T>& local_out, const std::vector<T>& global_out,
                                          std::size_t views, std::size_t h, std::size_t w) const {
  const std::size_t p = config_.patch_size;
  const std::size_t gw = w / p;
  const std::size_t per_view = (h / p) * gw;
  const std::size_t ho = config_.head_output_dim();
  PredictionBundle bundle;
  for (std::size_t v = 0; v < views; ++v) {
    for (int which = 0; which < 2; ++which) {
      const std::vector<T>& out = which == 0 ? local_out : global_out;
      Pointmap pm(h, w, which == 0 ? Frame::Local : Frame::Global);
      std::vector<double> conf(h * w);
      for (std::size_t row = 0; row < h; ++row)
        for (std::size_t col = 0; col < w; ++col) {
          const std::size_t t = v * per_view + (row / p) * gw + col / p;
          const T* o = out.data() + t * ho + ((row % p) * p + col % p) * 4;
          pm.points[row * w + col] = Vec3(o[0], o[1], o[2]);
          conf[row * w + col] = static_cast<double>(o[3]);
        }
      ConfidenceMap cm(h, w, std::move(conf));
      if (which == 0) {
        bundle.local.push_back(std::move(pm));
        bundle.local_conf.push_back(std::move(cm));
      } else {
        bundle.global.push_back(std::move(pm));
        bundle.global_conf.push_back(std::move(cm));
      }
    }
  }
  return bundle;
}

template <typename T>
PredictionBundle FusionModel<T>::decode_heads(std::span<const T> fused, std::size_t views, std::size_t h,
                                              std::size_t w, const ForwardOptions& opts) const {
  check_image_shape(h, w);
  const std::size_t per_view = (h / config_.patch_size) * (w / config_.patch_size);
  if (fused.size() != views * per_view * config_.embed_dim) {
    throw Error(ErrorKind::Shape, "fused token count does not match views x patches");
  }
  std::vector<T> hidden, act, local_out, global_out;
  decode_into(local_head_, fused, views, per_view, opts.jobs, hidden, act, local_out);
  decode_into(global_head_, fused, views, per_view, opts.jobs, hidden, act, global_out);
  return assemble(local_out, global_out, views, h, w);
}

template <typename T>
PredictionBundle FusionModel<T>::forward(const ImageSet& images, const IndexAssignment& assignment,
                                         const ForwardOptions& opts, Tape<T>* tape) const {
  if (images.count == 0) throw Error(ErrorKind::Shape, "no images");
  if (assignment.size() != images.count) {
    throw Error(ErrorKind::Shape, "index assignment length differs from view count");
  }
  assignment.validate(config_.pool_size);
  const std::size_t d = config_.embed_dim;
  const std::size_t per_view = (images.height / config_.patch_size) * (images.width / config_.patch_size);

  std::vector<T> x = encode_tokens(images, tape);
  for (std::size_t v = 0; v < images.count; ++v) {
    const std::vector<double> emb = index_embedding(assignment.indices[v], d, config_.pool_size);
    for (std::size_t t = v * per_view; t < (v + 1) * per_view; ++t)
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] += static_cast<T>(emb[i]);
  }
  const std::size_t tokens = images.count * per_view;
  fusion_impl(x, tokens, tape);

  if (tape != nullptr) {
    tape->y = x;
    decode_into(local_head_, x, images.count, per_view, opts.jobs, tape->local_head.hidden, tape->local_head.act,
                tape->local_head.out);
    decode_into(global_head_, x, images.count, per_view, opts.jobs, tape->global_head.hidden,
                tape->global_head.act, tape->global_head.out);
    tape->generation = params_.generation();
    tape->views = images.count;
    tape->height = images.height;
    tape->width = images.width;
    tape->recorded = true;
    return assemble(tape->local_head.out, tape->global_head.out, images.count, images.height, images.width);
  }
  return decode_heads(x, images.count, images.height, images.width, opts);
}

template <typename T>
void FusionModel<T>::backward(const BundleGradient& grad, const Tape<T>& tape) {
  if (!tape.recorded || tape.generation != params_.generation()) {
    throw Error(ErrorKind::StaleTape, "tape does not belong to the current parameters");
  }
  const std::size_t views = tape.views;
  const std::size_t h = tape.height;
  const std::size_t w = tape.width;
  const std::size_t p = config_.patch_size;
  const std::size_t gw = w / p;
  const std::size_t per_view = (h / p) * gw;
  const std::size_t tokens = views * per_view;
  const std::size_t d = config_.embed_dim;
  const std::size_t dm = config_.mlp_hidden_dim();
  const std::size_t hh = config_.head_hidden_dim;
  const std::size_t ho = config_.head_output_dim();
  const std::size_t heads = config_.attention_heads;
  if (grad.local.size() != views || grad.global.size() != views || grad.local_conf.size() != views ||
      grad.global_conf.size() != views) {
    throw Error(ErrorKind::StaleTape, "gradient view count differs from recorded forward");
  }
  for (std::size_t v = 0; v < views; ++v) {
    if (grad.local[v].size() != h * w || grad.global[v].size() != h * w || grad.local_conf[v].size() != h * w ||
        grad.global_conf[v].size() != h * w) {
      throw Error(ErrorKind::StaleTape, "gradient grid differs from recorded forward");
    }
  }

  std::vector<T> dy(tokens * d, T(0));
  auto head_backward = [&](const HeadIds& ids, const typename Tape<T>::Head& rec,
                           const std::vector<std::vector<Vec3>>& dpts, const std::vector<std::vector<double>>& dconf) {
    std::vector<T> dout(tokens * ho, T(0));
    for (std::size_t v = 0; v < views; ++v)
      for (std::size_t row = 0; row < h; ++row)
        for (std::size_t col = 0; col < w; ++col) {
          const std::size_t pix = row * w + col;
          const std::size_t off = (v * per_view + (row / p) * gw + col / p) * ho + ((row % p) * p + col % p) * 4;
          for (int c = 0; c < 3; ++c) dout[off + c] = static_cast<T>(dpts[v][pix][c]);
          const double raw = static_cast<double>(rec.out[off + 3]);
          // The clamp passes gradient only strictly inside its range.
          if (raw > -kConfidenceClamp && raw < kConfidenceClamp) dout[off + 3] = static_cast<T>(dconf[v][pix]);
        }
    std::vector<T> dact(tokens * hh);
    linear_backward(dout.data(), rec.act.data(), tokens, params_[ids.fc2_w], params_[ids.fc2_b], dact.data(), false);
    gelu_backward(rec.hidden.data(), dact.data(), dact.size());
    linear_backward(dact.data(), tape.y.data(), tokens, params_[ids.fc1_w], params_[ids.fc1_b], dy.data(), true);
  };
  head_backward(local_head_, tape.local_head, grad.local, grad.local_conf);
  head_backward(global_head_, tape.global_head, grad.global, grad.global_conf);

  std::vector<T> dx(tokens * d);
  layer_norm_backward(dy.data(), tape.final_ln.xhat.data(), tape.final_ln.rstd.data(), tokens, d,
                      params_[final_ln_g_], params_[final_ln_b_], dx.data(), false);

  std::vector<T> dact(tokens * dm), dbuf(tokens * d), dctx(tokens * d), dqkv(tokens * 3 * d);
  for (std::size_t l = blocks_.size(); l-- > 0;) {
    const BlockIds& ids = blocks_[l];
    const auto& rec = tape.blocks[l];
    linear_backward(dx.data(), rec.act.data(), tokens, params_[ids.fc2_w], params_[ids.fc2_b], dact.data(), false);
    gelu_backward(rec.hidden.data(), dact.data(), dact.size());
    linear_backward(dact.data(), rec.b.data(), tokens, params_[ids.fc1_w], params_[ids.fc1_b], dbuf.data(), false);
    layer_norm_backward(dbuf.data(), rec.ln2.xhat.data(), rec.ln2.rstd.data(), tokens, d, params_[ids.ln2_g],
                        params_[ids.ln2_b], dx.data(), true);

    linear_backward(dx.data(), rec.ctx.data(), tokens, params_[ids.proj_w], params_[ids.proj_b], dctx.data(), false);
    attention_backward(rec.qkv.data(), rec.probs.data(), dctx.data(), tokens, d, heads, dqkv.data());
    linear_backward(dqkv.data(), rec.a.data(), tokens, params_[ids.qkv_w], params_[ids.qkv_b], dbuf.data(), false);
    layer_norm_backward(dbuf.data(), rec.ln1.xhat.data(), rec.ln1.rstd.data(), tokens, d, params_[ids.ln1_g],
                        params_[ids.ln1_b], dx.data(), true);
  }

  // Encoder: enc = e + fc2(gelu(fc1(norm(e)))), e = patch projection + fixed position.
  std::vector<T> denc_act(tokens * dm);
  linear_backward(dx.data(), tape.enc_act.data(), tokens, params_[enc_fc2_w_], params_[enc_fc2_b_], denc_act.data(),
                  false);
  gelu_backward(tape.enc_hidden.data(), denc_act.data(), denc_act.size());
  linear_backward(denc_act.data(), tape.enc_n.data(), tokens, params_[enc_fc1_w_], params_[enc_fc1_b_], dbuf.data(),
                  false);
  layer_norm_backward(dbuf.data(), tape.enc_ln.xhat.data(), tape.enc_ln.rstd.data(), tokens, d, params_[enc_ln_g_],
                      params_[enc_ln_b_], dx.data(), true);
  linear_backward<T>(dx.data(), tape.patches.data(), tokens, params_[patch_w_], params_[patch_b_], nullptr, false);
}

template class FusionModel<float>;
template class FusionModel<double>;

}  // namespace f3r
