#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/rng.hpp"

namespace tssl {

struct AugmentPolicy {
  // Stage 1: one draw shared by every frame of the clip.
  bool crop = true;
  double crop_area = 0.70;  // mean retained fraction of the frame
  bool color_jitter = true;
  double gain_min = 0.8, gain_max = 1.2, bias_max = 0.1, grayscale_prob = 0.2;
  double flip_prob = 0.5;
  // Stage 2: fresh draw per frame.
  bool framewise_enabled = true;
  double framewise_area = 0.80;  // mean retained fraction of the stage-1 crop
  bool framewise_jitter = false;
  bool framewise_flip = false;

  static AugmentPolicy none() {
    AugmentPolicy p;
    p.crop = false;
    p.color_jitter = false;
    p.flip_prob = 0.0;
    p.framewise_enabled = false;
    return p;
  }
};

/// Affine map from normalized output coordinates u in [0,1] to source coordinates.
struct AxisMap {
  double offset = 0.0, scale = 1.0;
  double operator()(double u) const { return offset + scale * u; }
  AxisMap then(const AxisMap& outer) const { return {outer.offset + outer.scale * offset, outer.scale * scale}; }
  bool operator==(const AxisMap&) const = default;
};

struct Geometry {
  AxisMap x, y;
  std::array<double, 2> map(double u, double v) const { return {x(u), y(v)}; }
  // Region of the source that survives, as a fraction of the source area.
  double retained_area() const { return std::abs(x.scale) * std::abs(y.scale); }
  bool operator==(const Geometry&) const = default;
};

struct ColorTransform {
  std::array<double, 3> gain{1, 1, 1}, bias{0, 0, 0};
  bool grayscale = false;
  bool operator==(const ColorTransform&) const = default;
};

struct FramePlan {
  Geometry geometry;
  ColorTransform color;
  std::vector<ColorTransform> extra_color;  // frame-wise jitter, applied after `color`
};

struct ClipPlan {
  std::vector<FramePlan> frames;
};

namespace augment_detail {

// Crop of mean area `mean_area` with aspect ratio in [3/4, 4/3], fully inside the unit square.
inline Geometry sample_crop(double mean_area, Rng& rng) {
  const double area = rng.uniform(0.8 * mean_area, std::min(1.0, 1.2 * mean_area));
  const double lo = std::max(0.75, area), hi = std::min(4.0 / 3.0, 1.0 / area);
  const double ratio = std::exp(rng.uniform(std::log(lo), std::log(hi)));
  const double w = std::min(1.0, std::sqrt(area * ratio)), h = std::min(1.0, std::sqrt(area / ratio));
  const double x = rng.uniform(0.0, 1.0 - w), y = rng.uniform(0.0, 1.0 - h);
  return {{x, w}, {y, h}};
}

inline ColorTransform sample_color(const AugmentPolicy& p, Rng& rng) {
  ColorTransform c;
  for (int ch = 0; ch < 3; ++ch) {
    c.gain[ch] = rng.uniform(p.gain_min, p.gain_max);
    c.bias[ch] = rng.uniform(-p.bias_max, p.bias_max);
  }
  c.grayscale = rng.bernoulli(p.grayscale_prob);
  return c;
}

inline Geometry flip_x(Geometry g) {
  g.x = AxisMap{1.0, -1.0}.then(g.x);
  return g;
}

}  // namespace augment_detail

/// Draws the stage-1 parameters once and, when enabled, fresh stage-2 crops per frame.
/// `window` restricts the whole clip to a fixed source region (identity = full frame).
inline ClipPlan plan_augmentation(std::size_t num_frames, const AugmentPolicy& p, Rng& rng,
                                  const Geometry& window = {}) {
  using namespace augment_detail;
  Geometry stage1 = p.crop ? sample_crop(p.crop_area, rng) : Geometry{};
  const ColorTransform color = p.color_jitter ? sample_color(p, rng) : ColorTransform{};
  if (rng.bernoulli(p.flip_prob)) stage1 = flip_x(stage1);
  ClipPlan plan;
  for (std::size_t f = 0; f < num_frames; ++f) {
    FramePlan fp;
    Geometry local{};
    if (p.framewise_enabled) {
      local = sample_crop(p.framewise_area, rng);
      if (p.framewise_flip && rng.bernoulli(0.5)) local = flip_x(local);
      if (p.framewise_jitter) fp.extra_color.push_back(sample_color(p, rng));
    }
    // output -> stage-2 crop -> stage-1 crop (+flip) -> window -> source
    fp.geometry = {local.x.then(stage1.x).then(window.x), local.y.then(stage1.y).then(window.y)};
    fp.color = color;
    plan.frames.push_back(std::move(fp));
  }
  return plan;
}

/// Samples one uint8 RGB source frame through a plan into an out_size x out_size float
/// frame (bilinear, edge-clamped), then applies color transforms and clamps to [0,1].
inline void render_augmented(std::span<const std::uint8_t> src, std::size_t src_w, std::size_t src_h,
                             const FramePlan& plan, std::size_t out_size, std::span<float> out) {
  if (src.size() < src_w * src_h * 3 || out.size() < out_size * out_size * 3)
    throw DimensionError("render_augmented: buffer too small");
  auto apply_color = [](const ColorTransform& c, double rgb[3]) {
    for (int ch = 0; ch < 3; ++ch) rgb[ch] = rgb[ch] * c.gain[ch] + c.bias[ch];
    if (c.grayscale) {
      const double l = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      rgb[0] = rgb[1] = rgb[2] = l;
    }
  };
  const double inv = 1.0 / static_cast<double>(out_size);
  for (std::size_t oy = 0; oy < out_size; ++oy)
    for (std::size_t ox = 0; ox < out_size; ++ox) {
      const auto s = plan.geometry.map((ox + 0.5) * inv, (oy + 0.5) * inv);
      const double px = std::clamp(s[0] * static_cast<double>(src_w) - 0.5, 0.0, static_cast<double>(src_w - 1));
      const double py = std::clamp(s[1] * static_cast<double>(src_h) - 0.5, 0.0, static_cast<double>(src_h - 1));
      const auto x0 = static_cast<std::size_t>(px), y0 = static_cast<std::size_t>(py);
      const std::size_t x1 = std::min(x0 + 1, src_w - 1), y1 = std::min(y0 + 1, src_h - 1);
      const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
      double rgb[3];
      for (int ch = 0; ch < 3; ++ch) {
        auto at = [&](std::size_t x, std::size_t y) { return src[(y * src_w + x) * 3 + ch] / 255.0; };
        rgb[ch] = (at(x0, y0) * (1 - fx) + at(x1, y0) * fx) * (1 - fy) + (at(x0, y1) * (1 - fx) + at(x1, y1) * fx) * fy;
      }
      apply_color(plan.color, rgb);
      for (const auto& c : plan.extra_color) apply_color(c, rgb);
      for (int ch = 0; ch < 3; ++ch)
        out[(oy * out_size + ox) * 3 + ch] = static_cast<float>(std::clamp(rgb[ch], 0.0, 1.0));
    }
}

/// Augments a clip of uint8 frames (frames * H * W * 3) into float frames at out_size.
inline std::vector<float> augment(std::span<const std::uint8_t> frames, std::size_t num_frames, std::size_t src_w,
                                  std::size_t src_h, std::size_t out_size, const AugmentPolicy& policy, Rng& rng,
                                  const Geometry& window = {}) {
  if (num_frames == 0) throw ContractError("augment: no frames");
  const ClipPlan plan = plan_augmentation(num_frames, policy, rng, window);
  const std::size_t fb = src_w * src_h * 3, ob = out_size * out_size * 3;
  std::vector<float> out(num_frames * ob);
  for (std::size_t f = 0; f < num_frames; ++f)
    render_augmented(frames.subspan(f * fb, fb), src_w, src_h, plan.frames[f], out_size, std::span(out).subspan(f * ob, ob));
  return out;
}

/// Fixed square source window of `size` px at a random position (the local-patch input condition).
inline Geometry random_patch_window(std::size_t src_w, std::size_t src_h, std::size_t size, Rng& rng) {
  if (size == 0 || size > src_w || size > src_h) throw ContractError("random_patch_window: bad patch size");
  const double w = static_cast<double>(size) / static_cast<double>(src_w);
  const double h = static_cast<double>(size) / static_cast<double>(src_h);
  const auto x = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(src_w - size))) / static_cast<double>(src_w);
  const auto y = static_cast<double>(rng.uniform_int(0, static_cast<std::int64_t>(src_h - size))) / static_cast<double>(src_h);
  return {{x, w}, {y, h}};
}

}  // namespace tssl
