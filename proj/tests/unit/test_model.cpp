#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "f3r/error.hpp"
#include "f3r/losses.hpp"
#include "f3r/model.hpp"
#include "f3r/synthgen.hpp"
#include "test_util.hpp"

using namespace f3r;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.fusion_layers = 1;
  c.attention_heads = 2;
  c.mlp_ratio = 2.0;
  c.head_hidden_dim = 32;
  c.pool_size = 8;
  c.max_train_views = 2;
  c.precision = Precision::Double;
  return c;
}

ImageSet random_images(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageSet images(n, h, w);
  for (auto& p : images.pixels) p = u(rng);
  return images;
}

double max_abs_diff(const Pointmap& a, const Pointmap& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, (a.points[i] - b.points[i]).cwiseAbs().maxCoeff());
  return d;
}

double max_abs_diff(const ConfidenceMap& a, const ConfidenceMap& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.raw(i) - b.raw(i)));
  return d;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("f3r_test_model_" + name);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.attention_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.pool_size = 1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("index assignment sampling") {
  std::mt19937_64 rng(31);
  const IndexAssignment one = sample_index_assignment(1, 32, rng);
  CHECK(one.indices == std::vector<std::uint32_t>{1});
  IndexAssignment full = sample_index_assignment(8, 8, rng);
  CHECK(full.indices[0] == 1);
  std::sort(full.indices.begin(), full.indices.end());
  CHECK(full.indices == std::vector<std::uint32_t>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK_THROWS_WITH_AS(sample_index_assignment(9, 8, rng), doctest::Contains("PoolTooSmall"), Error);
  CHECK(consecutive_index_assignment(3, 8).indices == std::vector<std::uint32_t>{1, 2, 3});
}

TEST_CASE("index sampling is uniform over the pool") {
  std::mt19937_64 rng(32);
  std::vector<double> count(33, 0.0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto a = sample_index_assignment(4, 32, rng);
    a.validate(32);
    for (std::size_t k = 1; k < a.size(); ++k) count[a.indices[k]] += 1.0;
  }
  for (std::uint32_t idx = 2; idx <= 32; ++idx) CHECK(std::abs(count[idx] / draws - 3.0 / 31.0) < 0.01);
}

TEST_CASE("index embeddings") {
  const auto a = index_embedding(5, 64, 1000);
  CHECK(a == index_embedding(5, 64, 1000));
  double norm = 0.0;
  for (double x : a) norm += x * x;
  CHECK(std::abs(std::sqrt(norm) - std::sqrt(32.0)) < 1e-9);
  std::vector<std::vector<double>> all;
  for (std::uint32_t i = 1; i <= 1000; ++i) all.push_back(index_embedding(i, 64, 1000));
  double gap = 1e9;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < 64; ++k) d += (all[i][k] - all[j][k]) * (all[i][k] - all[j][k]);
      gap = std::min(gap, std::sqrt(d));
    }
  CHECK(gap > 1e-6);
}

TEST_CASE("patchify shapes and determinism") {
  ModelConfig c = tiny_config();
  c.precision = Precision::Single;
  FusionModel<float> model(c);
  model.init(1);
  const ImageSet img = random_images(2, 32, 32, 3);
  const auto t0 = model.patchify_encode(img.view(0), 32, 32);
  CHECK(t0.size() == 64 * 16);
  ImageSet twin(2, 32, 32);
  std::copy(img.view(0), img.view(0) + img.view_stride(), twin.view(0));
  std::copy(img.view(0), img.view(0) + img.view_stride(), twin.view(1));
  CHECK(model.patchify_encode(twin.view(0), 32, 32) == model.patchify_encode(twin.view(1), 32, 32));
  CHECK_THROWS_WITH_AS(model.patchify_encode(img.view(0), 30, 32), doctest::Contains("ShapeError"), Error);
}

TEST_CASE("zero attention projection leaves only the MLP path") {
  ModelConfig c = tiny_config();
  FusionModel<double> model(c);
  model.randomize_all(4, 0.3);
  std::fill(model.params().get("fusion.blocks.0.attn.proj.weight").value.begin(),
            model.params().get("fusion.blocks.0.attn.proj.weight").value.end(), 0.0);
  std::fill(model.params().get("fusion.blocks.0.attn.proj.bias").value.begin(),
            model.params().get("fusion.blocks.0.attn.proj.bias").value.end(), 0.0);
  std::vector<double> token(16);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& x : token) x = n(rng);
  const auto out = model.fusion_forward(token, 1);
  CHECK(out.size() == 16);

  // Same result when the attention branch weights are scrambled further.
  auto& qkv = model.params().get("fusion.blocks.0.attn.qkv.weight").value;
  for (auto& x : qkv) x *= -3.0;
  model.params().bump_generation();
  const auto again = model.fusion_forward(token, 1);
  for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(out[i] - again[i]) < 1e-12);
}

TEST_CASE("zero weights give zero pointmaps and the bias confidence") {
  ModelConfig c = tiny_config();
  FusionModel<double> model(c);
  for (auto& t : model.params().tensors()) std::fill(t.value.begin(), t.value.end(), 0.0);
  for (auto& t : model.params().tensors())
    if (t.name.find("norm") != std::string::npos && t.name.ends_with(".weight")) std::fill(t.value.begin(), t.value.end(), 1.0);
  for (const char* head : {"head_local.fc2.bias", "head_global.fc2.bias"}) {
    auto& b = model.params().get(head).value;
    for (std::size_t k = 0; k < b.size(); ++k) b[k] = k % 4 == 3 ? 1.5 : 0.0;
  }
  model.params().bump_generation();
  const PredictionBundle out = model.forward(random_images(2, 8, 8, 6), consecutive_index_assignment(2, 8));
  for (std::size_t v = 0; v < 2; ++v) {
    CHECK(out.local[v].height == 8);
    CHECK(out.local[v].width == 8);
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(out.local[v].points[i].norm() == 0.0);
      CHECK(out.global[v].points[i].norm() == 0.0);
      CHECK(out.local_conf[v].raw(i) == 1.5);
      CHECK(out.global_conf[v].raw(i) == 1.5);
    }
  }
}

TEST_CASE("heads are independent") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(7, 0.2);
  const ImageSet img = random_images(2, 8, 8, 8);
  const auto slots = consecutive_index_assignment(2, 8);
  const PredictionBundle a = model.forward(img, slots);
  model.params().get("head_local.fc1.weight").value[3] += 0.5;
  model.params().bump_generation();
  const PredictionBundle b = model.forward(img, slots);
  CHECK(max_abs_diff(a.global[0], b.global[0]) == 0.0);
  CHECK(max_abs_diff(a.global_conf[1], b.global_conf[1]) == 0.0);
  CHECK(max_abs_diff(a.local[0], b.local[0]) > 0.0);
}

TEST_CASE("forward is deterministic and handles long sequences") {
  ModelConfig c = tiny_config();
  c.precision = Precision::Single;
  FusionModel<float> model(c);
  model.randomize_all(9, 0.1);
  const ImageSet img = random_images(4, 8, 8, 10);
  std::mt19937_64 rng(11);
  const auto slots = sample_index_assignment(4, 8, rng);
  const PredictionBundle a = model.forward(img, slots);
  const PredictionBundle b = model.forward(img, slots);
  for (std::size_t v = 0; v < 4; ++v) CHECK(max_abs_diff(a.global[v], b.global[v]) == 0.0);
  const PredictionBundle one = model.forward(random_images(1, 8, 8, 12), consecutive_index_assignment(1, 8));
  CHECK(one.view_count() == 1);
  const PredictionBundle many = model.forward(random_images(8, 8, 8, 13), sample_index_assignment(8, 8, rng));
  for (const auto& pm : many.global)
    for (const auto& p : pm.points) CHECK(p.allFinite());
}

TEST_CASE("attention rows sum to one") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(14, 0.5);
  const ImageSet img = random_images(2, 8, 8, 15);
  Tape<double> tape;
  model.forward(img, consecutive_index_assignment(2, 8), {}, &tape);
  const auto& probs = tape.blocks[0].probs;
  const std::size_t tokens = 8;
  CHECK(probs.size() == 2 * tokens * tokens);
  for (std::size_t row = 0; row < 2 * tokens; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < tokens; ++j) s += probs[row * tokens + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("permuting views after the first permutes the outputs") {
  ModelConfig c = tiny_config();
  c.precision = Precision::Single;
  c.embed_dim = 32;
  c.attention_heads = 4;
  c.fusion_layers = 2;
  FusionModel<float> model(c);
  model.randomize_all(16, 0.1);
  const ImageSet img = random_images(4, 8, 8, 17);
  const IndexAssignment slots{{1, 5, 3, 8}};
  const std::size_t perm[] = {0, 2, 3, 1};
  ImageSet shuffled(4, 8, 8);
  IndexAssignment shuffled_slots;
  for (std::size_t v = 0; v < 4; ++v) {
    std::copy(img.view(perm[v]), img.view(perm[v]) + img.view_stride(), shuffled.view(v));
    shuffled_slots.indices.push_back(slots.indices[perm[v]]);
  }
  const PredictionBundle a = model.forward(img, slots);
  const PredictionBundle b = model.forward(shuffled, shuffled_slots);
  double worst = 0.0;
  for (std::size_t v = 0; v < 4; ++v) {
    worst = std::max({worst, max_abs_diff(a.global[perm[v]], b.global[v]), max_abs_diff(a.local[perm[v]], b.local[v]),
                      max_abs_diff(a.global_conf[perm[v]], b.global_conf[v])});
  }
  CHECK(worst < 1e-5);

  // Swapping which image sits in slot 1 is not a symmetry.
  ImageSet swapped(4, 8, 8);
  const std::size_t swap[] = {1, 0, 2, 3};
  for (std::size_t v = 0; v < 4; ++v) std::copy(img.view(swap[v]), img.view(swap[v]) + img.view_stride(), swapped.view(v));
  const PredictionBundle s = model.forward(swapped, slots);
  CHECK(max_abs_diff(a.global[1], s.global[0]) > 1e-4);
}

TEST_CASE("zero bundle gradient gives zero parameter gradients") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(18, 0.2);
  Tape<double> tape;
  const PredictionBundle out = model.forward(random_images(2, 8, 8, 19), consecutive_index_assignment(2, 8), {}, &tape);
  model.params().zero_grad();
  model.backward(BundleGradient::zeros_like(out), tape);
  for (const auto& t : model.params().tensors())
    for (double g : t.grad) CHECK(g == 0.0);
}

TEST_CASE("output bias gradient of the summed outputs counts tokens") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(20, 0.2);
  Tape<double> tape;
  const PredictionBundle out = model.forward(random_images(2, 8, 8, 21), consecutive_index_assignment(2, 8), {}, &tape);
  BundleGradient g = BundleGradient::zeros_like(out);
  for (auto& view : g.local)
    for (auto& p : view) p = Vec3::Ones();
  model.params().zero_grad();
  model.backward(g, tape);
  const auto& bias = model.params().get("head_local.fc2.bias").grad;
  // Each output channel of the head feeds exactly one pixel per token.
  for (std::size_t k = 0; k < bias.size(); ++k) CHECK(bias[k] == doctest::Approx(k % 4 == 3 ? 0.0 : 8.0).epsilon(1e-12));
  // fc2 weight (out x hidden): coefficient is the summed hidden activation.
  const auto& w = model.params().get("head_local.fc2.weight");
  const std::size_t hidden = w.shape[1];
  for (std::size_t h = 0; h < hidden; ++h) {
    double expect = 0.0;
    for (std::size_t t = 0; t < 8; ++t) expect += tape.local_head.act[t * hidden + h];
    CHECK(w.grad[0 * hidden + h] == doctest::Approx(expect).epsilon(1e-12));
  }
  for (double x : model.params().get("head_global.fc2.bias").grad) CHECK(x == 0.0);
}

TEST_CASE("stale tapes are rejected") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(22, 0.2);
  Tape<double> tape;
  const PredictionBundle out = model.forward(random_images(2, 8, 8, 23), consecutive_index_assignment(2, 8), {}, &tape);
  model.params().bump_generation();
  CHECK_THROWS_WITH_AS(model.backward(BundleGradient::zeros_like(out), tape), doctest::Contains("StaleTape"), Error);
  Tape<double> empty;
  CHECK_THROWS_AS(model.backward(BundleGradient::zeros_like(out), empty), Error);
}

TEST_CASE("model gradients match central differences") {
  FusionModel<double> model(tiny_config());
  model.randomize_all(24, 0.2);
  RenderSettings rs;
  rs.height = 8;
  rs.width = 8;
  rs.views = 2;
  const GroundTruthSample gt = generate_sample(rs, 25);
  std::mt19937_64 rng(26);
  const IndexAssignment slots = sample_index_assignment(2, 8, rng);
  const LossConfig cfg;

  Tape<double> tape;
  const PredictionBundle out = model.forward(gt.images, slots, {}, &tape);
  model.params().zero_grad();
  model.backward(loss_gradients(out, gt, cfg).grad, tape);

  auto loss = [&] { return total_loss(model.forward(gt.images, slots), gt, cfg).total; };
  const double eps = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto& t : model.params().tensors()) {
    // A strided subset keeps the unit suite fast; the acceptance run covers all.
    for (std::size_t i = 0; i < t.size(); i += 7) {
      const double keep = t.value[i];
      t.value[i] = keep + eps;
      model.params().bump_generation();
      const double up = loss();
      t.value[i] = keep - eps;
      model.params().bump_generation();
      const double down = loss();
      t.value[i] = keep;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = t.grad[i];
      worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
      ++checked;
    }
  }
  model.params().bump_generation();
  CHECK(checked > 1000);
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = tiny_config();
  c.precision = Precision::Single;
  FusionModel<float> model(c);
  model.randomize_all(27, 0.3);
  const auto path = temp_file("roundtrip.f3rckpt").string();
  save_params(model, path);
  FusionModel<float> loaded(c);
  load_params(loaded, path);
  for (std::size_t k = 0; k < model.params().tensors().size(); ++k) {
    CHECK(model.params()[k].value == loaded.params()[k].value);
  }

  ModelConfig other = c;
  other.embed_dim = 32;
  FusionModel<float> mismatched(other);
  CHECK_THROWS_WITH_AS(load_params(mismatched, path), doctest::Contains("ConfigMismatch"), Error);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("FormatError"), Error);
  CHECK_THROWS_WITH_AS(read_checkpoint(temp_file("missing.f3rckpt").string()), doctest::Contains("IoError"), Error);
  std::filesystem::remove(path);
}
