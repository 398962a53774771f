#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numeric>

#include "tssl/augment.hpp"
#include "tssl/batch.hpp"
#include "tssl/sampler.hpp"

namespace tssl {
namespace {

TEST(SampleOfl, ForcedStartAndZeroRatioIsInOrder) {
  Rng rng(1);
  const auto s = sample_ofl_at(192, 0, 0.0, OflOptions{}, rng);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{0, 4, 8, 12, 16, 20, 24, 28}));
  EXPECT_EQ(s.outlier, std::vector<std::uint8_t>(8, 0));
}

TEST(SampleOfl, HalfRatioGivesFourOutliers) {
  OflOptions opt;
  opt.rho_min = opt.rho_max = 0.5;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto s = sample_ofl(192, opt, rng);
    EXPECT_EQ(std::accumulate(s.outlier.begin(), s.outlier.end(), 0), 4);
  }
}

TEST(SampleOfl, OutlierCountLawAndWindow) {
  const OflOptions opt;
  Rng rng(2024);
  std::array<double, 9> counts{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto s = sample_ofl(192, opt, rng);
    counts[std::accumulate(s.outlier.begin(), s.outlier.end(), 0)] += 1.0 / draws;
    const auto in_order = in_order_indices(s.start, 8, 4);
    const std::size_t lo = in_order.front() > 64 ? in_order.front() - 64 : 0;
    const std::size_t hi = std::min<std::size_t>(191, in_order.back() + 64);
    for (std::size_t j = 0; j < 8; ++j) {
      if (s.outlier[j]) {
        ASSERT_NE(s.indices[j], in_order[j]);
        ASSERT_GE(s.indices[j], lo);
        ASSERT_LE(s.indices[j], hi);
      } else {
        ASSERT_EQ(s.indices[j], in_order[j]);
      }
    }
    ASSERT_EQ(decode_outliers(s.indices, s.start, 4), s.outlier);
  }
  // int(U[0,0.5) * 8) is uniform on {0,1,2,3}.
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(counts[k], 0.25, 0.01) << k;
  for (int k = 4; k < 9; ++k) EXPECT_NEAR(counts[k], 0.0, 0.01) << k;
}

TEST(SampleOfl, WindowClampedAtSequenceEnds) {
  Rng rng(5);
  OflOptions opt;
  opt.rho_min = opt.rho_max = 0.5;
  for (int i = 0; i < 2000; ++i) {
    const auto s = sample_ofl(29, opt, rng);
    for (auto idx : s.indices) ASSERT_LT(idx, 29u);
  }
  EXPECT_THROW(sample_ofl(28, opt, rng), ContractError);
}

TEST(SampleOfl, BeforeAfterAndMinDistanceModes) {
  OflOptions opt;
  opt.rho_min = opt.rho_max = 0.5;
  opt.mode = ReplacementMode::before_after;
  Rng rng(9);
  for (int i = 0; i < 2000; ++i) {
    const auto s = sample_ofl(192, opt, rng);
    const auto in_order = in_order_indices(s.start, 8, 4);
    for (std::size_t j = 0; j < 8; ++j)
      if (s.outlier[j]) {
        const bool before = s.indices[j] < in_order.front() && in_order.front() - s.indices[j] <= 64;
        const bool after = s.indices[j] > in_order.back() && s.indices[j] - in_order.back() <= 64;
        ASSERT_TRUE(before || after);
      }
  }
  opt.mode = ReplacementMode::min_distance;
  opt.max_distance = 32;
  for (int i = 0; i < 2000; ++i) {
    const auto s = sample_ofl(192, opt, rng);
    const auto in_order = in_order_indices(s.start, 8, 4);
    for (std::size_t j = 0; j < 8; ++j)
      if (s.outlier[j]) {
        const std::size_t d = s.indices[j] > in_order[j] ? s.indices[j] - in_order[j] : in_order[j] - s.indices[j];
        ASSERT_GE(d, 32u);
      }
  }
}

TEST(SampleTsp, DegenerateSkipSet) {
  Rng rng(3);
  const auto s = sample_tsp(100, 8, {1}, rng);
  for (std::size_t j = 1; j < 8; ++j) EXPECT_EQ(s.indices[j], s.indices[j - 1] + 1);
  EXPECT_EQ(s.labels, std::vector<std::size_t>(7, 0));
}

TEST(SampleTsp, ForcedGaps) {
  const std::vector<std::size_t> skips{1, 4, 8};
  const auto s = tsp_from_gaps(0, {4, 1, 8, 4, 1, 8, 4, 1}, skips);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{4, 5, 13, 17, 18, 26, 30, 31}));
  EXPECT_EQ(s.labels, (std::vector<std::size_t>{0, 2, 1, 0, 2, 1, 0}));
  EXPECT_EQ(decode_skip_labels(s.indices, skips), s.labels);
}

TEST(SampleTsp, ClassFrequenciesUniform) {
  const std::vector<std::size_t> skips{1, 4, 8};
  Rng rng(77);
  std::array<double, 3> freq{};
  const int draws = 100000;
  double total = 0;
  for (int i = 0; i < draws; ++i) {
    const auto s = sample_tsp(192, 8, skips, rng);
    for (std::size_t j = 1; j < 8; ++j) ASSERT_GT(s.indices[j], s.indices[j - 1]);
    ASSERT_LT(s.indices.back(), 192u);
    ASSERT_EQ(decode_skip_labels(s.indices, skips), s.labels);
    for (auto l : s.labels) freq[l] += 1;
    total += 7;
  }
  for (double f : freq) EXPECT_NEAR(f / total, 1.0 / 3.0, 0.02);
  EXPECT_THROW(sample_tsp(64, 8, skips, rng), ContractError);
  EXPECT_THROW(tsp_from_gaps(0, {2, 1}, skips), ContractError);
}

std::vector<std::uint8_t> test_frames(std::size_t n, std::size_t w, std::size_t h, bool identical) {
  std::vector<std::uint8_t> out(n * w * h * 3);
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t i = 0; i < w * h * 3; ++i)
      out[f * w * h * 3 + i] = static_cast<std::uint8_t>((i * 37 + (identical ? 0 : f * 11)) % 251);
  return out;
}

TEST(Augment, DisabledPolicyIsIdentity) {
  const auto frames = test_frames(3, 16, 16, false);
  Rng rng(1);
  const auto out = augment(frames, 3, 16, 16, 16, AugmentPolicy::none(), rng);
  for (std::size_t i = 0; i < frames.size(); ++i) ASSERT_NEAR(out[i], frames[i] / 255.0f, 1e-6f);
}

TEST(Augment, FramewiseCropsDiffer) {
  const auto frames = test_frames(4, 32, 32, true);
  Rng rng(2);
  const auto out = augment(frames, 4, 32, 32, 32, AugmentPolicy{}, rng);
  const std::size_t fb = 32 * 32 * 3;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double mad = 0;
      for (std::size_t i = 0; i < fb; ++i) mad += std::abs(out[a * fb + i] - out[b * fb + i]);
      EXPECT_GT(mad / fb, 0.0) << a << "," << b;
    }
  for (float v : out) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Augment, ComposedRetainedArea) {
  Rng rng(3);
  double sum = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) sum += plan_augmentation(1, AugmentPolicy{}, rng).frames[0].geometry.retained_area();
  EXPECT_NEAR(sum / draws, 0.56, 0.05);
}

TEST(Augment, ConsistentStageSharesGeometry) {
  AugmentPolicy p;
  p.framewise_enabled = false;
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto plan = plan_augmentation(8, p, rng);
    for (std::size_t f = 1; f < 8; ++f)
      for (double u = 0; u <= 1.0; u += 0.25)
        for (double v = 0; v <= 1.0; v += 0.25) {
          ASSERT_EQ(plan.frames[f].geometry.map(u, v), plan.frames[0].geometry.map(u, v));
          ASSERT_EQ(plan.frames[f].color, plan.frames[0].color);
        }
    for (double u = 0; u <= 1.0; u += 0.25) {
      const auto s = plan.frames[0].geometry.map(u, u);
      ASSERT_GE(s[0], -1e-12);
      ASSERT_LE(s[0], 1 + 1e-12);
    }
  }
}

TEST(Augment, FramewiseStageNeverFlipsByDefault) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto plan = plan_augmentation(4, AugmentPolicy{}, rng);
    const double sign = plan.frames[0].geometry.x.scale;
    for (const auto& f : plan.frames) ASSERT_EQ(f.geometry.x.scale > 0, sign > 0);
  }
}

TEST(Augment, PatchWindowConfinesSource) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Geometry win = random_patch_window(64, 64, 16, rng);
    const auto plan = plan_augmentation(2, AugmentPolicy{}, rng, win);
    for (const auto& f : plan.frames)
      for (double u : {0.0, 1.0}) {
        const auto s = f.geometry.map(u, u);
        ASSERT_GE(s[0], win.x.offset - 1e-12);
        ASSERT_LE(s[0], win.x.offset + win.x.scale + 1e-12);
        ASSERT_GE(s[1], win.y.offset - 1e-12);
        ASSERT_LE(s[1], win.y.offset + win.y.scale + 1e-12);
      }
  }
}

TEST(BuildBatch, ShapesAndSharedLabels) {
  CorpusSpec cs;
  cs.frame_count = 100;
  const Corpus corpus = Corpus::procedural(10, 10, 4, cs);
  BatchOptions opt;
  opt.image_size = 16;
  const Batch b = build_batch(corpus, corpus.indices(Split::train), 2, opt, Rng(1));
  std::vector<std::size_t> all = b.ofl_videos;
  all.insert(all.end(), b.tsp_videos.begin(), b.tsp_videos.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(std::unique(all.begin(), all.end()), all.end());
  EXPECT_EQ(all.size(), 4u);
  EXPECT_EQ(b.ofl.size(), 2u);
  EXPECT_EQ(b.tsp.size(), 2u);
  EXPECT_EQ(b.ofl_view1.size(), 2u * 8 * 16 * 16 * 3);
  EXPECT_EQ(b.ofl_view2.size(), b.ofl_view1.size());
  EXPECT_NE(b.ofl_view1, b.ofl_view2);
  EXPECT_EQ(b.outlier.size(), 16u);
  EXPECT_EQ(b.tsp_labels.size(), 14u);
  for (std::size_t e = 0; e < 2; ++e)
    EXPECT_EQ(std::vector<std::uint8_t>(b.outlier.begin() + e * 8, b.outlier.begin() + (e + 1) * 8), b.ofl[e].outlier);
  EXPECT_THROW(build_batch(corpus, corpus.indices(Split::train), 11, opt, Rng(1)), ContractError);
  EXPECT_THROW(build_batch(corpus, {}, 1, opt, Rng(1)), ContractError);
  // Same stream, same batch.
  const Batch again = build_batch(corpus, corpus.indices(Split::train), 2, opt, Rng(1));
  EXPECT_EQ(again.ofl_view1, b.ofl_view1);
  EXPECT_EQ(again.tsp_frames, b.tsp_frames);
}

TEST(BuildBatch, ClipLevelLabels) {
  CorpusSpec cs;
  cs.frame_count = 100;
  const Corpus corpus = Corpus::procedural(10, 10, 4, cs);
  BatchOptions opt;
  opt.image_size = 8;
  opt.task = PretextTask::clip_level;
  opt.second_view = false;
  std::size_t shuffled = 0, total = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Batch b = build_batch(corpus, corpus.indices(Split::train), 4, opt, Rng(s));
    for (std::size_t e = 0; e < 4; ++e) {
      const auto& clip = b.ofl[e];
      auto sorted = clip.indices;
      std::sort(sorted.begin(), sorted.end());
      EXPECT_EQ(sorted, in_order_indices(clip.start, 8, 4));
      EXPECT_EQ(clip.indices != sorted, b.order_labels[e] == 1);
      EXPECT_EQ(std::accumulate(clip.outlier.begin(), clip.outlier.end(), 0), b.order_labels[e] ? 4 : 0);
      shuffled += b.order_labels[e];
      ++total;
      const auto& t = b.tsp[e];
      for (std::size_t j = 1; j < 8; ++j) EXPECT_EQ(t.indices[j] - t.indices[j - 1], opt.skip_set[b.rate_labels[e]]);
    }
  }
  EXPECT_NEAR(static_cast<double>(shuffled) / total, 0.5, 0.06);
}

TEST(BuildBatch, SelectionIsUniform) {
  const std::size_t n = 20, batch = 4;
  std::vector<double> freq(n, 0.0);
  Rng rng(12);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto [ofl, tsp] = batch_detail::select_videos(n, batch, rng);
    for (auto v : ofl) freq[v] += 1;
    for (auto v : tsp) freq[v] += 1;
  }
  const double expected = draws * 2.0 * batch / n;
  for (double f : freq) EXPECT_NEAR(f / expected, 1.0, 0.10);
  const auto [o2, t2] = batch_detail::select_videos(5, 4, rng);
  EXPECT_EQ(o2.size(), 4u);
  EXPECT_EQ(t2.size(), 4u);
}

}  // namespace
}  // namespace tssl
