#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tssl/trainer.hpp"

namespace tssl {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tssl_trainer_" + name);
  fs::remove_all(p);
  return p;
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.frame_dim = 16;
  c.frame_depth = 1;
  c.frame_heads = 2;
  c.temporal_dim = 16;
  c.temporal_depth = 1;
  c.temporal_heads = 2;
  c.proj_hidden = 16;
  c.proj_out = 8;
  return c;
}

const Corpus& small_corpus() {
  static const Corpus corpus = [] {
    CorpusSpec cs;
    cs.frame_count = 100;
    return Corpus::procedural(40, 10, 3, cs);
  }();
  return corpus;
}

TrainConfig small_train(const fs::path& dir) {
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 5;
  tc.steps_per_epoch = 3;
  tc.schedule.base_lr = 1e-3;
  tc.schedule.warmup_epochs = 1;
  tc.checkpoint_dir = dir;
  return tc;
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  ModelParams<double> P;
  P.tensors["x"] = Tensor<double>::from({4}, {1, 2, 3, 4}, true);
  const std::vector<double> g{0.5, -3.0, 1e-3, -1e-2};
  std::copy(g.begin(), g.end(), P.tensors["x"].mutable_grad().begin());
  OptimState<double> s;
  adam_step(P, s, 1e-2);
  const std::vector<double> before{1, 2, 3, 4};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(P["x"][i], before[i] - 1e-2 * (g[i] > 0 ? 1 : -1), 1e-7);
}

TEST(Adam, ZeroGradientAndMomentDecay) {
  ModelParams<double> P;
  P.tensors["x"] = Tensor<double>::from({2}, {1, -1}, true);
  OptimState<double> s;
  P.tensors["x"].mutable_grad();  // zeros
  adam_step(P, s, 1e-2);
  EXPECT_EQ(P["x"][0], 1.0);
  EXPECT_EQ(P["x"][1], -1.0);
  const std::vector<double> grad{1.0, 2.0};
  std::copy(grad.begin(), grad.end(), P.tensors["x"].mutable_grad().begin());
  adam_step(P, s, 1e-2);
  const auto m = s.m["x"], v = s.v["x"];
  P.tensors["x"].zero_grad();
  P.tensors["x"].mutable_grad();
  adam_step(P, s, 1e-2);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(s.m["x"][i], 0.9 * m[i], 1e-15);
    EXPECT_NEAR(s.v["x"][i], 0.999 * v[i], 1e-15);
  }
}

TEST(Adam, DescendsQuadratic) {
  ModelParams<double> P;
  P.tensors["x"] = Tensor<double>::from({1}, {1.0}, true);
  OptimState<double> s;
  for (int i = 0; i < 100; ++i) {
    P.zero_grad();
    backward(mul(P["x"], P["x"]));
    adam_step(P, s, 1e-2);
  }
  EXPECT_LT(std::abs(P["x"][0]), 0.5);
}

TEST(Adam, NonFiniteGradientIsRejectedByName) {
  ModelParams<double> P;
  P.tensors["w"] = Tensor<double>::from({2}, {1, 2}, true);
  P.tensors["w"].mutable_grad()[1] = NAN;
  OptimState<double> s;
  try {
    adam_step(P, s, 1e-2);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
  EXPECT_EQ(P["w"][0], 1.0);
  EXPECT_EQ(s.step, 0u);
}

TEST(Schedule, WarmupAndPlateau) {
  const ScheduleOptions o;
  PlateauState p;
  EXPECT_NEAR(scheduled_lr(o, 0, 0, 100, p), 0.0, 1e-12);
  EXPECT_NEAR(scheduled_lr(o, 2, 50, 100, p), 0.5e-4, 1e-12);
  EXPECT_DOUBLE_EQ(scheduled_lr(o, 5, 0, 100, p), 1e-4);
  p.observe(1.0, o.patience);
  for (std::size_t i = 0; i < 2 * o.patience; ++i) p.observe(1.0, o.patience);
  EXPECT_DOUBLE_EQ(scheduled_lr(o, 20, 0, 100, p), 2.5e-5);
  for (int i = 0; i < 100; ++i) p.observe(1.0, o.patience);
  EXPECT_DOUBLE_EQ(scheduled_lr(o, 200, 0, 100, p), 1e-6);
}

TEST(ClipGradNorm, RescalesJointNorm) {
  ModelParams<double> P;
  P.tensors["a"] = Tensor<double>::from({1}, {0}, true);
  P.tensors["b"] = Tensor<double>::from({1}, {0}, true);
  P.tensors["a"].mutable_grad()[0] = 3;
  P.tensors["b"].mutable_grad()[0] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(P, 1.0), 5.0);
  EXPECT_NEAR(P["a"].grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(P["b"].grad()[0], 0.8, 1e-15);
}

TEST(Train, DeterministicAndResumable) {
  const auto d1 = fresh_dir("a"), d2 = fresh_dir("b"), d3 = fresh_dir("c");
  const ModelConfig mc = small_config();
  train<float>(small_corpus(), mc, small_train(d1));
  train<float>(small_corpus(), mc, small_train(d2));
  const std::string csv = io_detail::read_file(d1 / "metrics.csv");
  EXPECT_EQ(csv, io_detail::read_file(d2 / "metrics.csv"));
  EXPECT_EQ(io_detail::read_file(d1 / "final.ckpt"), io_detail::read_file(d2 / "final.ckpt"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);

  // Resume from the epoch-1 checkpoint in a new directory.
  fs::create_directories(d3);
  fs::copy_file(d1 / "metrics.csv", d3 / "metrics.csv");
  const TensorArchive ck = load_archive(d1 / "epoch1.ckpt");
  train<float>(small_corpus(), mc, small_train(d3), &ck);
  EXPECT_EQ(io_detail::read_file(d3 / "metrics.csv"), csv);
  EXPECT_EQ(io_detail::read_file(d3 / "final.ckpt"), io_detail::read_file(d1 / "final.ckpt"));

  // Initial checkpoint equals a fresh initialization.
  TensorArchive init;
  store_params(init_params<float>(mc, 5), init);
  const TensorArchive saved = load_archive(d1 / "init.ckpt");
  for (const auto& [k, rec] : init) EXPECT_EQ(saved.at(k), rec) << k;

  // Checkpoint save -> load -> save is byte-identical.
  save_archive(load_archive(d1 / "final.ckpt"), d3 / "again.ckpt");
  EXPECT_EQ(io_detail::read_file(d3 / "again.ckpt"), io_detail::read_file(d1 / "final.ckpt"));
}

TEST(Train, ContrastiveOnlyLeavesTaskHeadsUntouched) {
  TrainConfig tc = small_train("");
  tc.epochs = 1;
  tc.steps_per_epoch = 2;
  tc.weights = LossWeights{0, 0, 1};
  const auto r = train<float>(small_corpus(), small_config(), tc);
  const auto init = init_params<float>(small_config(), tc.seed);
  for (const char* name : {"head.ofl.w", "head.ofl.b", "head.tsp.w", "head.tsp.b"}) {
    const auto a = r.params[name].data(), b = init[name].data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << name;
  }
  const auto a = r.params["proj.fc1.w"].data(), b = init["proj.fc1.w"].data();
  EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Train, FrozenFrameEncoder) {
  TrainConfig tc = small_train("");
  tc.epochs = 1;
  tc.steps_per_epoch = 4;
  tc.freeze_frame_encoder = true;
  const auto r = train<float>(small_corpus(), small_config(), tc);
  const auto init = init_params<float>(small_config(), tc.seed);
  const auto a = r.params["frame.patch.w"].data(), b = init["frame.patch.w"].data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  const auto c = r.params["reducer.w"].data(), d = init["reducer.w"].data();
  EXPECT_FALSE(std::equal(c.begin(), c.end(), d.begin()));
}

TEST(Train, NonFiniteLossHaltsWithLastGoodCheckpoint) {
  const auto dir = fresh_dir("nan");
  TrainConfig tc = small_train(dir);
  const ModelConfig mc = small_config();
  auto P = init_params<float>(mc, 1);
  P.tensors["frame.patch.w"].mutable_data()[0] = NAN;
  TrainResult<float> start{P, {}, {}, {}, {}, 0};
  const TensorArchive poisoned = training_archive(start);
  EXPECT_THROW(train<float>(small_corpus(), mc, tc, &poisoned), NumericalError);
  EXPECT_TRUE(fs::exists(dir / "last_good.ckpt"));
}

TEST(Train, RejectsBadConfig) {
  TrainConfig tc = small_train("");
  tc.batch_size = 1;
  EXPECT_THROW(train<float>(small_corpus(), small_config(), tc), ConfigError);
  tc.batch_size = 40;
  EXPECT_THROW(train<float>(small_corpus(), small_config(), tc), ConfigError);
}

}  // namespace
}  // namespace tssl
