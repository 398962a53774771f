#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/rng.hpp"

namespace tssl {

/// Where replacement frames for out-of-order positions come from.
enum class ReplacementMode {
  window,        // uniform over [min(I) - md, max(I) + md], clamped to the video
  before_after,  // only outside the clip, at most md frames before min(I) or after max(I)
  min_distance,  // anywhere in the video at least md frames from the replaced in-order index
};

struct OflOptions {
  std::size_t clip_len = 8;
  std::size_t delta = 4;
  std::size_t max_distance = 64;  // md; SIZE_MAX means unrestricted
  double rho_min = 0.0;
  double rho_max = 0.5;
  ReplacementMode mode = ReplacementMode::window;
};

struct OflIndices {
  std::size_t start = 0;
  double rho = 0.0;
  std::vector<std::size_t> indices;   // Î
  std::vector<std::uint8_t> outlier;  // M
};

struct TspIndices {
  std::size_t start = 0;
  std::vector<std::size_t> gaps;      // all p drawn skips; gaps[0] precedes the first frame
  std::vector<std::size_t> indices;   // I_s
  std::vector<std::size_t> labels;    // class of gaps[1..p-1] within the skip set
};

inline std::vector<std::size_t> in_order_indices(std::size_t start, std::size_t clip_len, std::size_t delta) {
  std::vector<std::size_t> out(clip_len);
  for (std::size_t j = 0; j < clip_len; ++j) out[j] = start + j * delta;
  return out;
}

namespace sampler_detail {

inline std::size_t sat_sub(std::size_t a, std::size_t b) { return a > b ? a - b : 0; }
inline std::size_t sat_add(std::size_t a, std::size_t b) {
  return b > std::numeric_limits<std::size_t>::max() - a ? std::numeric_limits<std::size_t>::max() : a + b;
}

// Replacement index for in-order value `in_order`, never equal to it.
inline std::size_t draw_replacement(std::size_t frame_count, std::size_t lo_clip, std::size_t hi_clip,
                                    std::size_t in_order, const OflOptions& opt, Rng& rng) {
  const std::size_t md = opt.max_distance, last = frame_count - 1;
  switch (opt.mode) {
    case ReplacementMode::window: {
      const std::size_t lo = sat_sub(lo_clip, md), hi = std::min(last, sat_add(hi_clip, md));
      if (lo == hi) throw ContractError("sample_ofl: replacement window holds a single frame");
      for (;;) {
        const auto s = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
        if (s != in_order) return s;
      }
    }
    case ReplacementMode::before_after: {
      const std::size_t before = std::min(lo_clip, md);
      const std::size_t after = std::min(last - hi_clip, md);
      if (before + after == 0) {
        OflOptions fallback = opt;
        fallback.mode = ReplacementMode::window;
        return draw_replacement(frame_count, lo_clip, hi_clip, in_order, fallback, rng);
      }
      const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(before + after) - 1));
      return k < before ? lo_clip - before + k : hi_clip + 1 + (k - before);
    }
    case ReplacementMode::min_distance: {
      std::vector<std::size_t> pool;
      for (std::size_t s = 0; s <= last; ++s)
        if ((s > in_order ? s - in_order : in_order - s) >= std::max<std::size_t>(md, 1)) pool.push_back(s);
      if (pool.empty()) throw ContractError("sample_ofl: no frame satisfies the minimum distance");
      return pool[rng.index(pool.size())];
    }
  }
  return in_order;
}

}  // namespace sampler_detail

/// OFL clip at a given start: k = int(rho * p) positions chosen without replacement get
/// replacement indices; the rest keep t + j*delta.
inline OflIndices sample_ofl_at(std::size_t frame_count, std::size_t start, double rho, const OflOptions& opt, Rng& rng) {
  const std::size_t p = opt.clip_len;
  if (p == 0 || start + opt.delta * (p - 1) >= frame_count)
    throw ContractError("sample_ofl: clip of " + std::to_string(p) + " frames at stride " + std::to_string(opt.delta) +
                        " from " + std::to_string(start) + " exceeds " + std::to_string(frame_count) + " frames");
  OflIndices s;
  s.start = start;
  s.rho = rho;
  s.indices = in_order_indices(start, p, opt.delta);
  s.outlier.assign(p, 0);
  const auto k = static_cast<std::size_t>(rho * static_cast<double>(p));
  const std::size_t lo = s.indices.front(), hi = s.indices.back();
  for (std::size_t j : rng.sample_without_replacement(p, std::min(k, p))) {
    s.indices[j] = sampler_detail::draw_replacement(frame_count, lo, hi, s.indices[j], opt, rng);
    s.outlier[j] = 1;
  }
  return s;
}

inline OflIndices sample_ofl(std::size_t frame_count, const OflOptions& opt, Rng& rng) {
  const std::size_t span = opt.delta * (opt.clip_len - 1);
  if (opt.clip_len == 0 || frame_count < span + 1)
    throw ContractError("sample_ofl: frame_count " + std::to_string(frame_count) + " < delta*(p-1)+1 = " +
                        std::to_string(span + 1));
  if (opt.rho_min < 0 || opt.rho_max > 1 || opt.rho_min > opt.rho_max) throw ContractError("sample_ofl: bad rho range");
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(frame_count - span - 1)));
  const double rho = opt.rho_min == opt.rho_max ? opt.rho_min : rng.uniform(opt.rho_min, opt.rho_max);
  return sample_ofl_at(frame_count, start, rho, opt, rng);
}

/// Recovers M by comparing Î against the arithmetic sequence t + j*delta.
inline std::vector<std::uint8_t> decode_outliers(const std::vector<std::size_t>& indices, std::size_t start,
                                                 std::size_t delta) {
  std::vector<std::uint8_t> m(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) m[j] = indices[j] != start + j * delta ? 1 : 0;
  return m;
}

inline std::size_t skip_class(const std::vector<std::size_t>& skip_set, std::size_t gap) {
  const auto it = std::find(skip_set.begin(), skip_set.end(), gap);
  if (it == skip_set.end()) throw ContractError("gap " + std::to_string(gap) + " not in skip set");
  return static_cast<std::size_t>(it - skip_set.begin());
}

/// Clip from a start and p drawn skips: index_i = start + gaps[0] + ... + gaps[i].
inline TspIndices tsp_from_gaps(std::size_t start, const std::vector<std::size_t>& gaps,
                                const std::vector<std::size_t>& skip_set) {
  TspIndices s;
  s.start = start;
  s.gaps = gaps;
  std::size_t pos = start;
  for (std::size_t g : gaps) {
    skip_class(skip_set, g);
    pos += g;
    s.indices.push_back(pos);
  }
  for (std::size_t j = 1; j < gaps.size(); ++j) s.labels.push_back(skip_class(skip_set, gaps[j]));
  return s;
}

inline TspIndices sample_tsp(std::size_t frame_count, std::size_t clip_len, const std::vector<std::size_t>& skip_set,
                             Rng& rng) {
  if (skip_set.empty() || clip_len < 2) throw ContractError("sample_tsp: empty skip set or clip_len < 2");
  const std::size_t max_skip = *std::max_element(skip_set.begin(), skip_set.end());
  if (frame_count < max_skip * clip_len + 1)
    throw ContractError("sample_tsp: frame_count " + std::to_string(frame_count) + " < max_skip*p+1 = " +
                        std::to_string(max_skip * clip_len + 1));
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(frame_count - max_skip * clip_len - 1)));
  std::vector<std::size_t> gaps(clip_len);
  for (auto& g : gaps) g = skip_set[rng.index(skip_set.size())];
  return tsp_from_gaps(start, gaps, skip_set);
}

/// Labels recomputed from consecutive index differences.
inline std::vector<std::size_t> decode_skip_labels(const std::vector<std::size_t>& indices,
                                                   const std::vector<std::size_t>& skip_set) {
  std::vector<std::size_t> out;
  for (std::size_t j = 1; j < indices.size(); ++j) out.push_back(skip_class(skip_set, indices[j] - indices[j - 1]));
  return out;
}

}  // namespace tssl
