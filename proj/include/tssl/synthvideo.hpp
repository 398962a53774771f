#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/rng.hpp"

namespace tssl {

enum class MotionClass : std::uint32_t {
  linear_right = 0,
  linear_up,
  diagonal,
  circular_cw,
  circular_ccw,
  zigzag_h,
  zigzag_v,
  bounce,
  spiral_out,
  sinusoidal,
};

inline constexpr std::uint32_t kNumMotionClasses = 10;

inline constexpr std::array<std::string_view, kNumMotionClasses> kMotionClassNames = {
    "linear-right", "linear-up", "diagonal", "circular-cw", "circular-ccw",
    "zigzag-h",     "zigzag-v",  "bounce",   "spiral-out",  "sinusoidal"};

struct VideoSpec {
  std::uint32_t width = 64;
  std::uint32_t height = 64;
  std::uint32_t channels = 3;
  std::uint32_t frame_count = 192;
  std::uint32_t class_id = 0;
  std::uint64_t seed = 0;
  double background_drift = 0.5;  // px/frame
  std::uint32_t sprite_size = 12;
  bool static_sprite = false;

  void validate() const {
    if (channels != 3) throw ContractError("VideoSpec: channels must be 3");
    if (class_id >= kNumMotionClasses)
      throw ContractError("VideoSpec: class_id " + std::to_string(class_id) + " out of range");
    if (width < 8 || height < 8 || frame_count == 0) throw ContractError("VideoSpec: degenerate size");
    if (sprite_size == 0 || sprite_size >= std::min(width, height))
      throw ContractError("VideoSpec: sprite_size must be in (0, min(width, height))");
  }

  std::size_t frame_bytes() const { return std::size_t{width} * height * channels; }
  std::size_t mask_bytes() const { return std::size_t{width} * height; }

  bool operator==(const VideoSpec&) const = default;
};

struct SyntheticVideo {
  VideoSpec spec;
  std::vector<std::uint8_t> frames;  // frame-major, row-major, RGB interleaved
  std::vector<std::uint8_t> masks;   // frame-major, row-major, {0,1}

  std::span<const std::uint8_t> frame(std::size_t t) const {
    return std::span(frames).subspan(t * spec.frame_bytes(), spec.frame_bytes());
  }
  std::span<const std::uint8_t> mask(std::size_t t) const {
    return std::span(masks).subspan(t * spec.mask_bytes(), spec.mask_bytes());
  }

  bool operator==(const SyntheticVideo&) const = default;
};

namespace synth_detail {

inline double lattice(std::uint64_t key, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = Rng::mix(key ^ Rng::mix(static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL ^
                                                  static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Smoothly interpolated lattice noise in [0,1), defined on the whole plane.
inline double value_noise(std::uint64_t key, double x, double y, double cell) {
  const double gx = x / cell, gy = y / cell;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = gx - fx, ty = gy - fy;
  tx = tx * tx * (3.0 - 2.0 * tx);
  ty = ty * ty * (3.0 - 2.0 * ty);
  const double a = lattice(key, ix, iy), b = lattice(key, ix + 1, iy);
  const double c = lattice(key, ix, iy + 1), d = lattice(key, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

struct Appearance {
  std::uint64_t bg_key, sprite_key;
  std::array<double, 3> bg_a, bg_b, sp_a, sp_b;
  double drift_angle;
};

// Depends on the seed only, so all classes share one appearance distribution.
inline Appearance appearance(std::uint64_t seed) {
  Rng rng = Rng(seed).split(1);
  Appearance a{};
  a.bg_key = rng.next_u64();
  a.sprite_key = rng.next_u64();
  for (int c = 0; c < 3; ++c) {
    a.bg_a[c] = rng.uniform(0.1, 0.45);
    a.bg_b[c] = rng.uniform(0.35, 0.7);
  }
  const std::size_t hot = rng.index(3);
  for (std::size_t c = 0; c < 3; ++c) {
    a.sp_a[c] = c == hot ? rng.uniform(0.85, 1.0) : rng.uniform(0.0, 0.3);
    a.sp_b[c] = c == hot ? rng.uniform(0.6, 0.8) : rng.uniform(0.5, 0.9);
  }
  a.drift_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return a;
}

struct Motion {
  double x0, y0, speed, phase, radius, amplitude, period, angle;
};

inline Motion motion_params(const VideoSpec& s) {
  Rng rng = Rng(s.seed).split(2);
  const double w = s.width, h = s.height, half = s.sprite_size / 2.0;
  const double max_radius = std::min(w, h) / 2.0 - half - 1.0;
  Motion m{};
  m.x0 = rng.uniform(0.0, w);
  m.y0 = rng.uniform(0.0, h);
  m.speed = 0.012 * w * rng.uniform(0.8, 1.2);
  m.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  m.radius = std::min(rng.uniform(0.22, 0.32) * std::min(w, h), max_radius);
  m.amplitude = std::min(rng.uniform(0.12, 0.18) * std::min(w, h), max_radius);
  m.period = rng.uniform(24.0, 36.0);
  m.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return m;
}

// Triangle wave with period 1, range [-1, 1].
inline double tri(double u) { return 4.0 * std::abs(u - std::floor(u + 0.5)) - 1.0; }

// Reflects a coordinate into [lo, hi].
inline double fold(double p, double lo, double hi) {
  const double span = hi - lo;
  double u = std::fmod(p - lo, 2.0 * span);
  if (u < 0) u += 2.0 * span;
  return lo + (u <= span ? u : 2.0 * span - u);
}

}  // namespace synth_detail

/// Sprite center at (fractional) frame time t.
inline std::array<double, 2> sprite_center(const VideoSpec& s, double t) {
  using namespace synth_detail;
  const Motion m = motion_params(s);
  const double cx = s.width / 2.0, cy = s.height / 2.0;
  if (s.static_sprite) return {cx, cy};
  const double v = m.speed, pi2 = 2.0 * std::numbers::pi;
  switch (static_cast<MotionClass>(s.class_id)) {
    case MotionClass::linear_right:
      return {m.x0 + v * t, m.y0};
    case MotionClass::linear_up:
      return {m.x0, m.y0 - v * t};
    case MotionClass::diagonal:
      return {m.x0 + v * t / std::numbers::sqrt2, m.y0 - v * t / std::numbers::sqrt2};
    case MotionClass::circular_cw:
      return {cx + m.radius * std::cos(m.phase + v / m.radius * t), cy + m.radius * std::sin(m.phase + v / m.radius * t)};
    case MotionClass::circular_ccw: {
      // Vertical mirror of the clockwise video with the same seed.
      VideoSpec cw = s;
      cw.class_id = static_cast<std::uint32_t>(MotionClass::circular_cw);
      const auto p = sprite_center(cw, t);
      return {p[0], s.height - p[1]};
    }
    case MotionClass::zigzag_h:
      return {m.x0 + 0.7 * v * t, cy + m.amplitude * tri(t / m.period + m.phase / pi2)};
    case MotionClass::zigzag_v:
      return {cx + m.amplitude * tri(t / m.period + m.phase / pi2), m.y0 + 0.7 * v * t};
    case MotionClass::bounce: {
      const double half = s.sprite_size / 2.0;
      return {fold(m.x0 + v * std::cos(m.angle) * t, half, s.width - half),
              fold(m.y0 + v * std::sin(m.angle) * t, half, s.height - half)};
    }
    case MotionClass::spiral_out: {
      const double r_min = 0.25 * m.radius;
      const double u = t / (2.0 * m.period) + m.phase / pi2;
      const double r = r_min + (m.radius - r_min) * (u - std::floor(u));
      const double th = m.phase + 1.5 * v / m.radius * t;
      return {cx + r * std::cos(th), cy + r * std::sin(th)};
    }
    case MotionClass::sinusoidal:
      return {m.x0 + 0.7 * v * t, cy + m.amplitude * std::sin(pi2 * t / m.period + m.phase)};
  }
  return {cx, cy};
}

/// Renders frame t of the video described by `spec` into rgb (W*H*3) and mask (W*H).
///
/// A value-noise sprite follows the class trajectory (wrapping on the torus) over a
/// two-octave value-noise background translated by background_drift px/frame along a
/// seed-chosen direction.
inline void render_frame(const VideoSpec& spec, std::uint32_t t, std::span<std::uint8_t> rgb,
                         std::span<std::uint8_t> mask) {
  using namespace synth_detail;
  if (static_cast<MotionClass>(spec.class_id) == MotionClass::circular_ccw && !spec.static_sprite) {
    // Mirrored frames keep every per-frame color histogram of the clockwise twin.
    VideoSpec cw = spec;
    cw.class_id = static_cast<std::uint32_t>(MotionClass::circular_cw);
    render_frame(cw, t, rgb, mask);
    const std::size_t row = spec.width * 3;
    for (std::size_t y = 0; y < spec.height / 2; ++y) {
      const std::size_t o = spec.height - 1 - y;
      std::swap_ranges(rgb.begin() + y * row, rgb.begin() + (y + 1) * row, rgb.begin() + o * row);
      std::swap_ranges(mask.begin() + y * spec.width, mask.begin() + (y + 1) * spec.width, mask.begin() + o * spec.width);
    }
    return;
  }
  const Appearance a = appearance(spec.seed);
  const double dx = std::cos(a.drift_angle) * spec.background_drift * t;
  const double dy = std::sin(a.drift_angle) * spec.background_drift * t;
  const auto c = sprite_center(spec, t);
  const auto w = static_cast<std::int64_t>(spec.width), h = static_cast<std::int64_t>(spec.height);
  const auto size = static_cast<std::int64_t>(spec.sprite_size);
  auto wrap = [](std::int64_t v, std::int64_t n) { return ((v % n) + n) % n; };
  const std::int64_t left = wrap(static_cast<std::int64_t>(std::lround(c[0] - size / 2.0)), w);
  const std::int64_t top = wrap(static_cast<std::int64_t>(std::lround(c[1] - size / 2.0)), h);
  auto to_u8 = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const std::int64_t lx = wrap(x - left, w), ly = wrap(y - top, h);
      const bool fg = lx < size && ly < size;
      const std::size_t pix = static_cast<std::size_t>(y * w + x);
      std::array<double, 3> col;
      if (fg) {
        const double n = value_noise(a.sprite_key, static_cast<double>(lx), static_cast<double>(ly), 4.0);
        for (int ch = 0; ch < 3; ++ch) col[ch] = a.sp_a[ch] * (1 - n) + a.sp_b[ch] * n;
      } else {
        const double bx = x + dx, by = y + dy;
        const double n = 0.65 * value_noise(a.bg_key, bx, by, 8.0) + 0.35 * value_noise(a.bg_key ^ 0xABCDEF, bx, by, 3.0);
        for (int ch = 0; ch < 3; ++ch) col[ch] = a.bg_a[ch] * (1 - n) + a.bg_b[ch] * n;
      }
      for (int ch = 0; ch < 3; ++ch) rgb[pix * 3 + ch] = to_u8(col[ch]);
      mask[pix] = fg ? 1 : 0;
    }
}

/// Whole video; a pure function of the spec.
inline SyntheticVideo generate(const VideoSpec& spec) {
  spec.validate();
  SyntheticVideo v;
  v.spec = spec;
  v.frames.resize(spec.frame_bytes() * spec.frame_count);
  v.masks.resize(spec.mask_bytes() * spec.frame_count);
  for (std::uint32_t t = 0; t < spec.frame_count; ++t)
    render_frame(spec, t, std::span(v.frames).subspan(t * spec.frame_bytes(), spec.frame_bytes()),
                 std::span(v.masks).subspan(t * spec.mask_bytes(), spec.mask_bytes()));
  return v;
}

}  // namespace tssl
