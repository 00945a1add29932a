#include <cmath>

#include "f3r/binary_io.hpp"
#include "f3r/error.hpp"
#include "f3r/model.hpp"

namespace f3r {

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::BinaryWriter out(path);
  out.magic(std::string_view(kCheckpointMagic, 8));
  out.put<std::uint32_t>(kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  out.put<std::uint32_t>(c.patch_size);
  out.put<std::uint32_t>(c.embed_dim);
  out.put<std::uint32_t>(c.fusion_layers);
  out.put<std::uint32_t>(c.attention_heads);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(std::llround(c.mlp_ratio * 1000.0)));
  out.put<std::uint32_t>(c.head_hidden_dim);
  out.put<std::uint32_t>(c.pool_size);
  out.put<std::uint32_t>(c.max_train_views);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(c.precision));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::vector<float> narrow;
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xffff) throw Error(ErrorKind::Format, "tensor name too long");
    out.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    out.bytes(t.name.data(), t.name.size());
    out.put<std::uint8_t>(t.dtype);
    out.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto dim : t.dims) out.put<std::uint64_t>(dim);
    if (t.dtype == 0) {
      narrow.assign(t.values.begin(), t.values.end());
      out.put_array<float>(narrow);
    } else {
      out.put_array<double>(t.values);
    }
  }
  out.close();
}

Checkpoint read_checkpoint(const std::string& path) {
  io::BinaryReader in(path);
  in.expect_magic(std::string_view(kCheckpointMagic, 8));
  if (in.get<std::uint32_t>() != kCheckpointVersion) throw Error(ErrorKind::Format, "unsupported checkpoint version");
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.patch_size = in.get<std::uint32_t>();
  c.embed_dim = in.get<std::uint32_t>();
  c.fusion_layers = in.get<std::uint32_t>();
  c.attention_heads = in.get<std::uint32_t>();
  c.mlp_ratio = static_cast<double>(in.get<std::uint32_t>()) / 1000.0;
  c.head_hidden_dim = in.get<std::uint32_t>();
  c.pool_size = in.get<std::uint32_t>();
  c.max_train_views = in.get<std::uint32_t>();
  const auto precision = in.get<std::uint32_t>();
  if (precision > 1) throw Error(ErrorKind::Format, "bad precision flag");
  c.precision = static_cast<Precision>(precision);
  const auto count = in.get<std::uint32_t>();
  std::vector<float> narrow;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name.resize(in.get<std::uint16_t>());
    in.bytes(t.name.data(), t.name.size());
    t.dtype = in.get<std::uint8_t>();
    if (t.dtype > 1) throw Error(ErrorKind::Format, "bad dtype for tensor " + t.name);
    const auto ndim = in.get<std::uint8_t>();
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      t.dims.push_back(in.get<std::uint64_t>());
      n *= t.dims.back();
    }
    const std::size_t width = t.dtype == 0 ? 4 : 8;
    if (n > in.remaining() / width) throw Error(ErrorKind::Format, "truncated tensor " + t.name);
    if (t.dtype == 0) {
      narrow.resize(n);
      in.get_array<float>(narrow);
      t.values.assign(narrow.begin(), narrow.end());
    } else {
      t.values.resize(n);
      in.get_array<double>(t.values);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.at_end()) throw Error(ErrorKind::Format, "trailing bytes in checkpoint");
  return ckpt;
}

template <typename T>
StoredTensor to_stored(const std::string& name, std::span<const std::size_t> shape, std::span<const T> values) {
  StoredTensor t;
  t.name = name;
  t.dtype = std::is_same_v<T, float> ? 0 : 1;
  t.dims.assign(shape.begin(), shape.end());
  t.values.assign(values.begin(), values.end());
  return t;
}

template <typename T>
void save_params(const FusionModel<T>& model, const std::string& path, std::span<const StoredTensor> extra) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& t : model.params().tensors()) {
    ckpt.tensors.push_back(to_stored<T>(t.name, t.shape, t.value));
  }
  ckpt.tensors.insert(ckpt.tensors.end(), extra.begin(), extra.end());
  write_checkpoint(ckpt, path);
}

template <typename T>
void load_params(FusionModel<T>& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config())) throw Error(ErrorKind::ConfigMismatch, "checkpoint config differs from model");
  constexpr std::uint8_t dtype = std::is_same_v<T, float> ? 0 : 1;
  for (auto& t : model.params().tensors()) {
    const StoredTensor* s = ckpt.find(t.name);
    if (s == nullptr) throw Error(ErrorKind::ConfigMismatch, "checkpoint lacks tensor " + t.name);
    if (s->dtype != dtype || s->dims.size() != t.shape.size() ||
        !std::equal(s->dims.begin(), s->dims.end(), t.shape.begin())) {
      throw Error(ErrorKind::ConfigMismatch, "tensor layout differs for " + t.name);
    }
    for (std::size_t i = 0; i < t.value.size(); ++i) t.value[i] = static_cast<T>(s->values[i]);
  }
  model.params().zero_grad();
  model.params().bump_generation();
}

template <typename T>
void load_params(FusionModel<T>& model, const std::string& path) {
  load_params(model, read_checkpoint(path));
}

template StoredTensor to_stored<float>(const std::string&, std::span<const std::size_t>, std::span<const float>);
template StoredTensor to_stored<double>(const std::string&, std::span<const std::size_t>, std::span<const double>);
template void save_params<float>(const FusionModel<float>&, const std::string&, std::span<const StoredTensor>);
template void save_params<double>(const FusionModel<double>&, const std::string&, std::span<const StoredTensor>);
template void load_params<float>(FusionModel<float>&, const Checkpoint&);
template void load_params<double>(FusionModel<double>&, const Checkpoint&);
template void load_params<float>(FusionModel<float>&, const std::string&);
template void load_params<double>(FusionModel<double>&, const std::string&);

}  // namespace f3r
