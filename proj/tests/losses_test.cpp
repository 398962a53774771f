#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "tssl/losses.hpp"
#include "tssl/objective.hpp"

namespace tssl {
namespace {

using testing::grad_check;
using testing::random_tensor;

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  const std::size_t w = t.dim(1);
  return {t.data().begin() + r * w, t.data().begin() + (r + 1) * w};
}

Tensor<double> unit_rows(std::size_t n, std::size_t d, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += (v[r * d + k] = rng.normal()) * v[r * d + k];
    for (std::size_t k = 0; k < d; ++k) v[r * d + k] /= std::sqrt(s);
  }
  return Tensor<double>::from({n, d}, v, requires_grad);
}

// Direct enumeration of the cross-clip objective.
double c1_oracle(const Tensor<double>& z1, const Tensor<double>& z2, const std::vector<std::size_t>& ids, double tau,
                 bool strict) {
  const std::size_t n = ids.size();
  double total = 0;
  std::size_t terms = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double neg = 0;
    for (std::size_t b = 0; b < n; ++b)
      if (ids[b] != ids[a]) neg += similarity(row(z1, a), row(z2, b), tau);
    for (std::size_t b = 0; b < n; ++b) {
      if (ids[b] != ids[a]) continue;
      const double pos = similarity(row(z1, a), row(z2, b), tau);
      total += -std::log(pos / (strict ? neg : pos + neg));
      ++terms;
    }
  }
  return total / static_cast<double>(terms);
}

double c2_oracle(const Tensor<double>& z1, const Tensor<double>& z2, const std::vector<std::size_t>& ids, double tau) {
  const std::size_t n = ids.size();
  double total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double den = 0;
    for (std::size_t b = 0; b < n; ++b)
      if (ids[b] == ids[a]) den += similarity(row(z1, a), row(z2, b), tau);
    total += -std::log(similarity(row(z1, a), row(z2, a), tau) / den);
  }
  return total / static_cast<double>(n);
}

std::vector<std::size_t> clip_ids(std::size_t clips, std::size_t frames) {
  std::vector<std::size_t> ids;
  for (std::size_t c = 0; c < clips; ++c)
    for (std::size_t f = 0; f < frames; ++f) ids.push_back(c);
  return ids;
}

TEST(LossOfl, AnalyticCases) {
  const std::vector<std::uint8_t> m{1, 0, 0, 1, 0, 1, 0, 0};
  std::vector<double> sat;
  for (auto f : m) sat.push_back(f ? 20.0 : -20.0);
  EXPECT_LT(loss_ofl(Tensor<double>::from({8}, sat), m).item(), 1e-8);
  EXPECT_NEAR(loss_ofl(Tensor<double>::zeros({8}), m).item(), std::numbers::ln2, 1e-12);
  Rng rng(1);
  const auto s = random_tensor({8}, rng, 5.0, false);
  double oracle = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-s[i]));
    oracle -= m[i] ? std::log(p) : std::log(1 - p);
  }
  EXPECT_NEAR(loss_ofl(s, m).item(), oracle / 8, 1e-7);
}

TEST(LossTsp, AnalyticCases) {
  const std::vector<std::size_t> labels{0, 2, 1, 0, 2, 1, 0};
  EXPECT_NEAR(loss_tsp(Tensor<double>::zeros({7, 3}), labels).item(), std::log(3.0), 1e-12);
  std::vector<double> onehot(21, 0.0);
  for (std::size_t i = 0; i < 7; ++i) onehot[i * 3 + labels[i]] = 20.0;
  // Non-target logits at -20 push the residual below 1e-8.
  for (std::size_t i = 0; i < 21; ++i)
    if (onehot[i] == 0.0) onehot[i] = -20.0;
  EXPECT_LT(loss_tsp(Tensor<double>::from({7, 3}, onehot), labels).item(), 1e-8);
  Rng rng(2);
  const auto x = random_tensor({7, 3}, rng, 3.0, false);
  double oracle = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(x[i * 3 + k]);
    oracle -= std::log(std::exp(x[i * 3 + labels[i]]) / z);
  }
  EXPECT_NEAR(loss_tsp(x, labels).item(), oracle / 7, 1e-7);
  EXPECT_THROW(loss_tsp(x, std::vector<std::size_t>{0, 1, 2, 3, 0, 1, 2}), ContractError);
}

TEST(Similarity, AnalyticCases) {
  const std::vector<double> a{1, 0}, b{0, 1}, c{-1, 0}, z{0, 0};
  EXPECT_NEAR(similarity(a, a, 0.1), 22026.465794806718, 1e-8);
  EXPECT_NEAR(similarity(a, b, 0.1), 1.0, 1e-15);
  EXPECT_NEAR(similarity(a, c, 0.1), std::exp(-10.0), 1e-18);
  EXPECT_THROW(similarity(a, z, 0.1), ContractError);
}

TEST(LossC1, HandFixedInstance) {
  // 2 clips x 2 frames in 2-D.
  const auto z1 = Tensor<double>::from({4, 2}, {1, 0, 0.6, 0.8, 0, 1, -0.8, 0.6});
  const auto z2 = Tensor<double>::from({4, 2}, {0.8, 0.6, 1, 0, -0.6, 0.8, 0, -1});
  const auto ids = clip_ids(2, 2);
  EXPECT_NEAR(loss_c1(z1, z2, ids, 0.1).item(), c1_oracle(z1, z2, ids, 0.1, false), 1e-6);
  EXPECT_NEAR(loss_c1(z1, z2, ids, 0.1, true).item(), c1_oracle(z1, z2, ids, 0.1, true), 1e-6);
}

TEST(LossC1, RandomInstancesMatchOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t clips = 2 + rng.index(3), frames = 1 + rng.index(4), d = 2 + rng.index(5);
    const auto z1 = unit_rows(clips * frames, d, rng), z2 = unit_rows(clips * frames, d, rng);
    const auto ids = clip_ids(clips, frames);
    for (bool strict : {false, true})
      ASSERT_NEAR(loss_c1(z1, z2, ids, 0.1, strict).item(), c1_oracle(z1, z2, ids, 0.1, strict), 1e-6) << seed;
  }
}

TEST(LossC1, IdenticalProjections) {
  const std::size_t clips = 3, frames = 4;
  const auto z = repeat_leading(Tensor<double>::from({3}, {0.6, 0.0, 0.8}), clips * frames);
  const double n_neg = (clips - 1) * frames;
  EXPECT_NEAR(loss_c1(z, z, clip_ids(clips, frames), 0.1).item(), std::log(1 + n_neg), 1e-9);
  EXPECT_THROW(loss_c1(z, z, clip_ids(1, 12), 0.1), ContractError);
}

TEST(LossC1, GradientsBothModes) {
  Rng rng(5);
  const auto z1 = unit_rows(6, 3, rng, true), z2 = unit_rows(6, 3, rng, true);
  const auto ids = clip_ids(3, 2);
  for (bool strict : {false, true}) {
    const auto res = grad_check([&] { return loss_c1(z1, z2, ids, 0.1, strict); }, {z1, z2});
    EXPECT_LT(res.max_rel_error, 1e-6);
  }
}

TEST(LossC2, OracleAndAnalyticCases) {
  Rng rng(6);
  const auto z1 = unit_rows(3, 4, rng), z2 = unit_rows(3, 4, rng);
  EXPECT_NEAR(loss_c2(z1, z2, clip_ids(1, 3), 0.1).item(), c2_oracle(z1, z2, clip_ids(1, 3), 0.1), 1e-6);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(1000 + seed);
    const std::size_t clips = 1 + r.index(4), frames = 2 + r.index(3), d = 2 + r.index(5);
    const auto a = unit_rows(clips * frames, d, r), b = unit_rows(clips * frames, d, r);
    const auto ids = clip_ids(clips, frames);
    ASSERT_NEAR(loss_c2(a, b, ids, 0.1).item(), c2_oracle(a, b, ids, 0.1), 1e-6) << seed;
  }
  const auto same = repeat_leading(Tensor<double>::from({2}, {1.0, 0.0}), 8);
  EXPECT_NEAR(loss_c2(same, same, clip_ids(2, 4), 0.1).item(), std::log(4.0), 1e-9);
  // Positive cosine 1, cross cosine 0.
  const auto u = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  EXPECT_NEAR(loss_c2(u, u, clip_ids(1, 2), 0.1).item(), -std::log(std::exp(10.0) / (std::exp(10.0) + 1)), 1e-12);
  EXPECT_NEAR(loss_c2(u, u, clip_ids(1, 2), 0.1).item(), 4.54e-5, 1e-7);
  EXPECT_THROW(loss_c2(u, u, clip_ids(2, 1), 0.1), ContractError);
  const auto z1g = unit_rows(6, 3, rng, true), z2g = unit_rows(6, 3, rng, true);
  EXPECT_LT(grad_check([&] { return loss_c2(z1g, z2g, clip_ids(2, 3), 0.1); }, {z1g, z2g}).max_rel_error, 1e-6);
}

TEST(LossCombined, WeightsAndGraphPruning) {
  const auto o = Tensor<double>::scalar(0.5, true), t = Tensor<double>::scalar(1.0, true);
  const auto c1 = Tensor<double>::scalar(0.25, true), c2 = Tensor<double>::scalar(0.0, true);
  const LossParts<double> parts{o, t, c1, c2};
  EXPECT_DOUBLE_EQ(loss_combined(parts, LossWeights{}).item(), 1.75);
  const auto only_ofl = loss_combined(parts, LossWeights{1, 0, 0});
  EXPECT_DOUBLE_EQ(only_ofl.item(), 0.5);
  backward(only_ofl);
  EXPECT_TRUE(o.has_grad());
  EXPECT_FALSE(t.has_grad());
  EXPECT_FALSE(c1.has_grad());
  EXPECT_DOUBLE_EQ(loss_combined(parts, LossWeights{0, 0, 1}).item(), 0.25);
  EXPECT_THROW(loss_combined(parts, LossWeights{-1, 1, 1}), ContractError);
  const LossParts<double> bad{Tensor<double>::scalar(std::nan("")), t, c1, c2};
  EXPECT_THROW(loss_combined(bad, LossWeights{}), NumericalError);
}

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

TEST(FullObjective, GradientMatchesFiniteDifferences) {
  const ModelConfig c = tiny_config();
  auto P = init_params<double>(c, 3);
  Rng rng(4);
  for (auto& [name, t] : P.tensors)
    for (auto& x : t.mutable_data()) x += rng.uniform(-0.3, 0.3);
  CorpusSpec cs;
  cs.frame_count = 160;
  const Corpus corpus = Corpus::procedural(10, 10, 1, cs);
  const LossWeights w;
  const Batch b = build_batch(corpus, corpus.indices(Split::train), 2, batch_options_for(c, w), Rng(8));
  std::vector<Tensor<double>> leaves;
  for (auto& [_, t] : P.tensors) leaves.push_back(t);
  const auto res = grad_check([&] { return pretext_forward(P, b, w).total; }, leaves);
  EXPECT_GT(res.checked, 1000u);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(FullObjective, InitialisationAnalytics) {
  const ModelConfig c;
  const auto P = init_params<float>(c, 1);
  const Corpus corpus = Corpus::procedural(20, 10, 2);
  const LossWeights w;
  const Batch b = build_batch(corpus, corpus.indices(Split::train), 4, batch_options_for(c, w), Rng(3));
  NoGradGuard guard;
  const auto fwd = pretext_forward(P, b, w);
  EXPECT_NEAR(fwd.parts.ofl.item(), std::numbers::ln2, 1e-3);
  EXPECT_NEAR(fwd.parts.tsp.item(), std::log(3.0), 1e-3);
  EXPECT_GE(fwd.parts.c1.item(), 0.0);
  EXPECT_GE(fwd.parts.c2.item(), 0.0);
}

}  // namespace
}  // namespace tssl
