#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "tssl/augment.hpp"
#include "tssl/corpus.hpp"
#include "tssl/errors.hpp"
#include "tssl/rng.hpp"
#include "tssl/sampler.hpp"

namespace tssl {

/// Which pretext family the batch feeds.
enum class PretextTask {
  frame_level,   // OFL + TSP (per-token / per-gap labels)
  clip_level,    // order verification + constant skiprate (one label per clip)
};

struct BatchOptions {
  OflOptions ofl;
  std::vector<std::size_t> skip_set{1, 4, 8};
  std::size_t image_size = 64;
  AugmentPolicy policy;
  std::size_t patch_window = 0;   // 0: full frame; otherwise a fixed square source window of this size
  bool second_view = true;        // contrastive losses need a second augmentation of each OFL clip
  bool need_ofl = true;
  bool need_tsp = true;
  PretextTask task = PretextTask::frame_level;
};

/// One training batch. Frame tensors are [clips * p, S, S, 3] floats in [0,1].
struct Batch {
  std::size_t clips = 0, clip_len = 0;
  std::vector<std::size_t> ofl_videos, tsp_videos;
  std::vector<OflIndices> ofl;
  std::vector<TspIndices> tsp;
  std::vector<float> ofl_view1, ofl_view2, tsp_frames;
  std::vector<std::uint8_t> outlier;    // clips * p
  std::vector<std::size_t> tsp_labels;  // clips * (p - 1)
  // Clip-level labels: order (1 = shuffled) for the OFL slot, skip class for the TSP slot.
  std::vector<std::uint8_t> order_labels;
  std::vector<std::size_t> rate_labels;
};

namespace batch_detail {

// Positions into the pool for the OFL and TSP slots of each element.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> select_videos(std::size_t pool, std::size_t batch_size,
                                                                                   Rng& rng) {
  std::vector<std::size_t> ofl, tsp;
  if (pool >= 2 * batch_size) {
    const auto ids = rng.sample_without_replacement(pool, 2 * batch_size);
    ofl.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(batch_size));
    tsp.assign(ids.begin() + static_cast<std::ptrdiff_t>(batch_size), ids.end());
  } else {
    ofl = rng.sample_without_replacement(pool, batch_size);
    tsp = rng.sample_without_replacement(pool, batch_size);
  }
  return {ofl, tsp};
}

// In-order clip with exactly `moved` positions permuted among themselves with no fixed point.
inline OflIndices shuffled_clip(std::size_t frame_count, const OflOptions& opt, bool shuffle, Rng& rng) {
  OflOptions in_order = opt;
  in_order.rho_min = in_order.rho_max = 0.0;
  OflIndices s = sample_ofl(frame_count, in_order, rng);
  if (!shuffle) return s;
  const std::size_t p = s.indices.size(), moved = std::max<std::size_t>(2, p / 2);
  auto pos = rng.sample_without_replacement(p, moved);
  std::sort(pos.begin(), pos.end());
  std::vector<std::size_t> perm(moved);
  for (;;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span(perm));
    bool derangement = true;
    for (std::size_t i = 0; i < moved; ++i) derangement = derangement && perm[i] != i;
    if (derangement) break;
  }
  const auto original = s.indices;
  for (std::size_t i = 0; i < moved; ++i) {
    s.indices[pos[i]] = original[pos[perm[i]]];
    s.outlier[pos[i]] = 1;
  }
  return s;
}

inline void render_clip(const Corpus& corpus, std::size_t video, const std::vector<std::size_t>& ts,
                        const BatchOptions& opt, const Geometry& window, Rng& rng, std::vector<float>& out) {
  const auto& v = corpus[video];
  const auto raw = corpus.frames(video, ts);
  const auto frames = augment(raw, ts.size(), v.width, v.height, opt.image_size, opt.policy, rng, window);
  out.insert(out.end(), frames.begin(), frames.end());
}

}  // namespace batch_detail

/// Assembles a batch from the videos listed in `pool` (indices into `corpus`).
///
/// Videos are drawn without replacement: 2B distinct videos when the pool allows it,
/// otherwise the OFL and TSP sets are each distinct. Every random choice for element b
/// comes from a stream keyed by b, so disabling a branch never changes the others.
inline Batch build_batch(const Corpus& corpus, const std::vector<std::size_t>& pool, std::size_t batch_size,
                         const BatchOptions& opt, Rng rng) {
  using namespace batch_detail;
  if (pool.empty()) throw ContractError("build_batch: empty video pool");
  if (batch_size == 0 || batch_size > pool.size())
    throw ContractError("build_batch: batch_size " + std::to_string(batch_size) + " exceeds " +
                        std::to_string(pool.size()) + " videos");
  Batch b;
  b.clips = batch_size;
  b.clip_len = opt.ofl.clip_len;
  Rng pick = rng.split(0);
  const auto [ofl_ids, tsp_ids] = select_videos(pool.size(), batch_size, pick);
  for (auto i : ofl_ids) b.ofl_videos.push_back(pool[i]);
  for (auto i : tsp_ids) b.tsp_videos.push_back(pool[i]);
  const std::size_t p = opt.ofl.clip_len;
  for (std::size_t e = 0; e < batch_size; ++e) {
    Rng er = rng.split(1 + e);
    if (opt.need_ofl) {
      Rng r = er.split(1);
      const std::size_t vid = b.ofl_videos[e];
      const auto& v = corpus[vid];
      OflIndices s;
      if (opt.task == PretextTask::frame_level) {
        s = sample_ofl(v.frame_count, opt.ofl, r);
      } else {
        const bool shuffle = r.bernoulli(0.5);
        s = shuffled_clip(v.frame_count, opt.ofl, shuffle, r);
        b.order_labels.push_back(shuffle ? 1 : 0);
      }
      Rng wr = er.split(2);
      const Geometry window = opt.patch_window ? random_patch_window(v.width, v.height, opt.patch_window, wr) : Geometry{};
      Rng a1 = er.split(3), a2 = er.split(4);
      render_clip(corpus, vid, s.indices, opt, window, a1, b.ofl_view1);
      if (opt.second_view) render_clip(corpus, vid, s.indices, opt, window, a2, b.ofl_view2);
      b.outlier.insert(b.outlier.end(), s.outlier.begin(), s.outlier.end());
      b.ofl.push_back(std::move(s));
    }
    if (opt.need_tsp) {
      Rng r = er.split(5);
      const std::size_t vid = b.tsp_videos[e];
      const auto& v = corpus[vid];
      TspIndices s;
      if (opt.task == PretextTask::frame_level) {
        s = sample_tsp(v.frame_count, p, opt.skip_set, r);
        b.tsp_labels.insert(b.tsp_labels.end(), s.labels.begin(), s.labels.end());
      } else {
        const std::size_t cls = r.index(opt.skip_set.size());
        const std::size_t gap = opt.skip_set[cls];
        const std::size_t max_skip = *std::max_element(opt.skip_set.begin(), opt.skip_set.end());
        if (v.frame_count < max_skip * p + 1) throw ContractError("build_batch: video too short for skip set");
        const auto start = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(v.frame_count - max_skip * p - 1)));
        s = tsp_from_gaps(start, std::vector<std::size_t>(p, gap), opt.skip_set);
        b.rate_labels.push_back(cls);
      }
      Rng wr = er.split(6), ar = er.split(7);
      const Geometry window = opt.patch_window ? random_patch_window(v.width, v.height, opt.patch_window, wr) : Geometry{};
      render_clip(corpus, vid, s.indices, opt, window, ar, b.tsp_frames);
      b.tsp.push_back(std::move(s));
    }
  }
  return b;
}

}  // namespace tssl
