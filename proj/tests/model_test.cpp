#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tssl/checkpoint.hpp"
#include "tssl/losses.hpp"
#include "tssl/model.hpp"

namespace tssl {
namespace {

using testing::grad_check;

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.frame_dim = 8;
  c.frame_depth = 1;
  c.frame_heads = 2;
  c.temporal_dim = 8;
  c.temporal_depth = 1;
  c.temporal_heads = 2;
  c.clip_len = 4;
  c.proj_hidden = 8;
  c.proj_out = 4;
  return c;
}

template <class T>
std::vector<T> random_frames(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(n * c.image_size * c.image_size * 3);
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return v;
}

template <class T>
void randomize(ModelParams<T>& P, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& [name, t] : P.tensors) {
    if (name.find(".ln") != std::string::npos) continue;
    for (auto& x : t.mutable_data()) x = static_cast<T>(rng.uniform(-scale, scale));
  }
}

template <class T>
std::vector<T> row(const Tensor<T>& t, std::size_t r) {
  const std::size_t w = t.size() / t.dim(0);
  return {t.data().begin() + r * w, t.data().begin() + (r + 1) * w};
}

TEST(Model, DefaultShapesAndBudget) {
  const ModelConfig c;
  const auto P = init_params<float>(c, 1);
  EXPECT_LT(P.count(), 1500000u);
  const auto frames = random_frames<float>(c, 8, 2);
  const auto enc = encode_frames(P, std::span<const float>(frames), 8);
  EXPECT_EQ(enc.cls.shape(), (Shape{8, 64}));
  EXPECT_EQ(enc.patches.shape(), (Shape{8, 64, 64}));
  const auto e = temporal_forward(P, reshape(enc.cls, {1, 8, 64}));
  EXPECT_EQ(e.shape(), (Shape{1, 8, 64}));
  EXPECT_EQ(ofl_logits(P, e).shape(), (Shape{1, 8}));
  EXPECT_EQ(tsp_logits(P, e).shape(), (Shape{1, 7, 3}));
  for (float v : enc.cls.data()) ASSERT_TRUE(std::isfinite(v));
  for (float v : e.data()) ASSERT_TRUE(std::isfinite(v));
  const auto scores = ofl_logits(P, e);
  for (float v : scores.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Model, ParameterCountIsPureFunctionOfConfig) {
  const ModelConfig c = tiny_config();
  EXPECT_EQ(init_params<float>(c, 1).count(), init_params<double>(c, 99).count());
  ModelConfig wider = c;
  wider.frame_dim = 16;
  EXPECT_GT(init_params<float>(wider, 1).count(), init_params<float>(c, 1).count());
}

TEST(Model, RejectsBadInputs) {
  const ModelConfig c = tiny_config();
  const auto P = init_params<double>(c, 1);
  const auto frames = random_frames<double>(c, 3, 1);
  EXPECT_THROW(encode_frames(P, std::span<const double>(frames), 4), DimensionError);
  EXPECT_THROW(temporal_forward(P, Tensor<double>::zeros({3, 8})), ContractError);
  ModelConfig bad = c;
  bad.frame_heads = 3;
  EXPECT_THROW(init_params<double>(bad, 1), ConfigError);
}

TEST(Model, FrameEncoderIsPerFrame) {
  const ModelConfig c = tiny_config();
  auto P = init_params<double>(c, 3);
  const std::size_t fs = 8 * 8 * 3;
  auto frames = random_frames<double>(c, 4, 5);
  std::copy_n(frames.begin(), fs, frames.begin() + 2 * fs);  // frame 2 == frame 0
  const auto cls = encode_frames(P, std::span<const double>(frames), 4).cls;
  EXPECT_EQ(row(cls, 0), row(cls, 2));

  // Permuting inputs permutes outputs.
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  std::vector<double> permuted(frames.size());
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(frames.begin() + perm[i] * fs, fs, permuted.begin() + i * fs);
  const auto cls_p = encode_frames(P, std::span<const double>(permuted), 4).cls;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(row(cls_p, i), row(cls, perm[i]));

  // Changing frame 1 changes only row 1.
  auto masked = frames;
  std::fill_n(masked.begin() + fs, fs, 0.0);
  const auto cls_m = encode_frames(P, std::span<const double>(masked), 4).cls;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i == 1)
      EXPECT_NE(row(cls_m, i), row(cls, i));
    else
      EXPECT_EQ(row(cls_m, i), row(cls, i));
  }
}

TEST(Model, TemporalEncoderPositionBinding) {
  const ModelConfig c = tiny_config();
  auto P = init_params<double>(c, 4);
  randomize(P, 11);
  Rng rng(6);
  const auto f = testing::random_tensor({4, 8}, rng, 1.0, false);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const auto fp = index_select(f, perm);

  auto pos = P.tensors["temporal.pos"].mutable_data();
  const std::vector<double> saved(pos.begin(), pos.end());
  std::fill(pos.begin(), pos.end(), 0.0);
  const auto e = temporal_forward(P, f), ep = temporal_forward(P, fp);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = row(ep, i), b = row(e, perm[i]);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }

  std::copy(saved.begin(), saved.end(), pos.begin());
  const auto e2 = temporal_forward(P, f), ep2 = temporal_forward(P, fp);
  double diff = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = row(ep2, i), b = row(e2, perm[i]);
    for (std::size_t k = 0; k < a.size(); ++k) diff = std::max(diff, std::abs(a[k] - b[k]));
  }
  EXPECT_GT(diff, 1e-3);
}

TEST(Model, HeadsOnConstantTokens) {
  const ModelConfig c = tiny_config();
  auto P = init_params<double>(c, 4);
  randomize(P, 12);
  const auto e = repeat_leading(Tensor<double>::from({8}, {1, 2, 3, 4, 5, 6, 7, 8}), 4);
  const auto logits = tsp_logits(P, e);
  ASSERT_EQ(logits.shape(), (Shape{3, 3}));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(logits[g * 3 + k], P["head.tsp.b"][k]);
}

TEST(Model, ProjectionIsUnitNorm) {
  const ModelConfig c = tiny_config();
  const auto P = init_params<double>(c, 8);
  Rng rng(9);
  const auto f = testing::random_tensor({16, 8}, rng, 5.0, false);
  const auto z = project(P, f);
  for (std::size_t r = 0; r < 16; ++r) {
    double n = 0;
    for (double v : row(z, r)) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
  const auto z10 = project(P, scale(f, 10.0));
  EXPECT_NE(row(z10, 0), row(z, 0));
}

TEST(Model, ContrastiveGradientThroughProjection) {
  const ModelConfig c = tiny_config();
  auto P = init_params<double>(c, 10);
  randomize(P, 13);
  Rng rng(14);
  const auto f1 = testing::random_tensor({6, 8}, rng);
  const auto f2 = testing::random_tensor({6, 8}, rng);
  const std::vector<std::size_t> ids{0, 0, 0, 1, 1, 1};
  std::vector<Tensor<double>> leaves{f1, f2, P["proj.fc1.w"], P["proj.fc1.b"], P["proj.fc2.w"], P["proj.fc2.b"]};
  const auto res = grad_check(
      [&] {
        const auto z1 = project(P, f1), z2 = project(P, f2);
        return add(loss_c1(z1, z2, ids, 0.1), loss_c2(z1, z2, ids, 0.1));
      },
      leaves);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelConfig c = tiny_config();
  auto P = init_params<float>(c, 21);
  randomize(P, 22);
  const auto dir = std::filesystem::temp_directory_path() / "tssl_ckpt_test";
  std::filesystem::create_directories(dir);
  save_params(P, dir / "a.ckpt");
  const auto Q = load_params<float>(dir / "a.ckpt");
  EXPECT_EQ(Q.config, c);
  for (const auto& [name, t] : P.tensors) {
    const auto& u = Q[name];
    ASSERT_EQ(u.shape(), t.shape());
    EXPECT_EQ(std::memcmp(u.data().data(), t.data().data(), t.size() * sizeof(float)), 0) << name;
  }
  save_params(Q, dir / "b.ckpt");
  EXPECT_EQ(io_detail::read_file(dir / "a.ckpt"), io_detail::read_file(dir / "b.ckpt"));

  const std::string bytes = io_detail::read_file(dir / "a.ckpt");
  EXPECT_THROW(decode_archive(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_archive("TSSLVID1xxxxxxxx"), FormatError);
  const auto arch = decode_archive(bytes);
  EXPECT_EQ(arch.at("param/head.ofl.w").dtype, DType::f32);
  EXPECT_EQ(arch.at("param/temporal.pos").shape, (Shape{4, 8}));
}

TEST(Checkpoint, InitIsDeterministicPerSeed) {
  const ModelConfig c = tiny_config();
  TensorArchive a, b, d;
  store_params(init_params<float>(c, 5), a);
  store_params(init_params<float>(c, 5), b);
  store_params(init_params<float>(c, 6), d);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, d);
  EXPECT_EQ(a.at("param/head.tsp.w").values<float>(), std::vector<float>(24, 0.0f));
}

}  // namespace
}  // namespace tssl
