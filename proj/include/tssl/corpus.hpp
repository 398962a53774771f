#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tssl/synthvideo.hpp"
#include "tssl/video_io.hpp"

namespace tssl {

/// Indexable set of labelled videos with per-frame access.
///
/// Videos are either rendered on demand from their spec (procedural) or read from
/// containers listed in a manifest. Both give identical bytes for the same spec.
class Corpus {
 public:
  struct Video {
    std::string path;
    std::uint32_t class_id = 0;
    Split split = Split::train;
    std::uint32_t width = 0, height = 0, frame_count = 0;
    std::optional<VideoSpec> spec;  // set for procedural videos
  };

  static Corpus procedural(std::size_t num_train, std::size_t num_test, std::uint64_t base_seed,
                           const CorpusSpec& cs = {}) {
    Corpus c;
    for (const auto& it : corpus_layout(num_train, num_test, base_seed, cs))
      c.videos_.push_back({it.path, it.spec.class_id, it.split, it.spec.width, it.spec.height, it.spec.frame_count, it.spec});
    return c;
  }

  static Corpus from_specs(const std::vector<VideoSpec>& specs, Split split = Split::test) {
    Corpus c;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      specs[i].validate();
      c.videos_.push_back({"spec/" + std::to_string(i), specs[i].class_id, split, specs[i].width, specs[i].height,
                           specs[i].frame_count, specs[i]});
    }
    return c;
  }

  static Corpus from_manifest(const std::filesystem::path& manifest_path) {
    const Manifest m = read_manifest(manifest_path);
    m.validate();
    Corpus c;
    c.root_ = manifest_path.parent_path();
    for (const auto& e : m.entries) {
      const VideoHeader h = read_video_header(c.root_ / e.path);
      if (h.class_id != e.class_id)
        throw FormatError("manifest class " + std::to_string(e.class_id) + " disagrees with container " + e.path, 28);
      c.videos_.push_back({e.path, e.class_id, e.split, h.width, h.height, h.frame_count, std::nullopt});
    }
    return c;
  }

  std::size_t size() const { return videos_.size(); }
  const Video& operator[](std::size_t i) const { return videos_.at(i); }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < videos_.size(); ++i)
      if (videos_[i].split == split) out.push_back(i);
    return out;
  }

  Corpus subset(const std::vector<std::size_t>& ids) const {
    Corpus c;
    c.root_ = root_;
    for (auto i : ids) c.videos_.push_back(videos_.at(i));
    return c;
  }

  std::uint32_t num_classes() const {
    std::uint32_t n = 0;
    for (const auto& v : videos_) n = std::max(n, v.class_id + 1);
    return n;
  }

  /// RGB bytes of the given frames, concatenated (frames.size() * H * W * 3).
  std::vector<std::uint8_t> frames(std::size_t i, std::span<const std::size_t> ts) const {
    const Video& v = videos_.at(i);
    const std::size_t fb = std::size_t{v.width} * v.height * 3, mb = std::size_t{v.width} * v.height;
    std::vector<std::uint8_t> out(ts.size() * fb);
    check_range(v, ts);
    if (v.spec) {
      std::vector<std::uint8_t> mask(mb);
      for (std::size_t k = 0; k < ts.size(); ++k)
        render_frame(*v.spec, static_cast<std::uint32_t>(ts[k]), std::span(out).subspan(k * fb, fb), mask);
    } else {
      VideoFile f(root_ / v.path);
      for (std::size_t k = 0; k < ts.size(); ++k)
        f.read_frame(static_cast<std::uint32_t>(ts[k]), std::span(out).subspan(k * fb, fb));
    }
    return out;
  }

  std::vector<std::uint8_t> masks(std::size_t i, std::span<const std::size_t> ts) const {
    const Video& v = videos_.at(i);
    const std::size_t fb = std::size_t{v.width} * v.height * 3, mb = std::size_t{v.width} * v.height;
    std::vector<std::uint8_t> out(ts.size() * mb);
    check_range(v, ts);
    if (v.spec) {
      std::vector<std::uint8_t> rgb(fb);
      for (std::size_t k = 0; k < ts.size(); ++k)
        render_frame(*v.spec, static_cast<std::uint32_t>(ts[k]), rgb, std::span(out).subspan(k * mb, mb));
    } else {
      VideoFile f(root_ / v.path);
      for (std::size_t k = 0; k < ts.size(); ++k)
        f.read_mask(static_cast<std::uint32_t>(ts[k]), std::span(out).subspan(k * mb, mb));
    }
    return out;
  }

 private:
  static void check_range(const Video& v, std::span<const std::size_t> ts) {
    for (auto t : ts)
      if (t >= v.frame_count)
        throw ContractError("frame " + std::to_string(t) + " out of range for " + v.path + " (" +
                            std::to_string(v.frame_count) + " frames)");
  }

  std::filesystem::path root_;
  std::vector<Video> videos_;
};

}  // namespace tssl
