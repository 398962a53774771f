#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/synthvideo.hpp"

namespace tssl {

// Container layout (little-endian):
//   "TSSLVID1" | version u32 | width u32 | height u32 | channels u32 | frame_count u32 |
//   class_id u32 | seed u64 | frames u8[frame_count*H*W*3] | masks u8[frame_count*H*W]
inline constexpr char kVideoMagic[8] = {'T', 'S', 'S', 'L', 'V', 'I', 'D', '1'};
inline constexpr std::uint32_t kVideoVersion = 1;
inline constexpr std::size_t kVideoHeaderBytes = 8 + 6 * 4 + 8;

namespace io_detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<U>(v);
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace io_detail

struct VideoHeader {
  std::uint32_t version = kVideoVersion;
  std::uint32_t width = 0, height = 0, channels = 0, frame_count = 0, class_id = 0;
  std::uint64_t seed = 0;

  std::size_t frame_bytes() const { return std::size_t{width} * height * channels; }
  std::size_t mask_bytes() const { return std::size_t{width} * height; }
  std::size_t total_bytes() const { return kVideoHeaderBytes + (frame_bytes() + mask_bytes()) * frame_count; }
};

inline VideoHeader parse_video_header(const unsigned char* p, std::size_t available) {
  if (available < 8) throw FormatError("video: truncated magic", available);
  if (std::memcmp(p, kVideoMagic, 8) != 0) throw FormatError("video: bad magic", 0);
  if (available < kVideoHeaderBytes) throw FormatError("video: truncated header", available);
  VideoHeader h;
  h.version = io_detail::get_le<std::uint32_t>(p + 8);
  if (h.version != kVideoVersion) throw FormatError("video: unsupported version " + std::to_string(h.version), 8);
  h.width = io_detail::get_le<std::uint32_t>(p + 12);
  h.height = io_detail::get_le<std::uint32_t>(p + 16);
  h.channels = io_detail::get_le<std::uint32_t>(p + 20);
  h.frame_count = io_detail::get_le<std::uint32_t>(p + 24);
  h.class_id = io_detail::get_le<std::uint32_t>(p + 28);
  h.seed = io_detail::get_le<std::uint64_t>(p + 32);
  if (h.channels != 3) throw FormatError("video: channels must be 3", 20);
  if (h.width == 0 || h.height == 0 || h.frame_count == 0) throw FormatError("video: zero dimension", 12);
  return h;
}

inline std::string encode_video(const SyntheticVideo& v) {
  std::string out;
  out.reserve(kVideoHeaderBytes + v.frames.size() + v.masks.size());
  out.append(kVideoMagic, 8);
  io_detail::put_le<std::uint32_t>(out, kVideoVersion);
  io_detail::put_le<std::uint32_t>(out, v.spec.width);
  io_detail::put_le<std::uint32_t>(out, v.spec.height);
  io_detail::put_le<std::uint32_t>(out, v.spec.channels);
  io_detail::put_le<std::uint32_t>(out, v.spec.frame_count);
  io_detail::put_le<std::uint32_t>(out, v.spec.class_id);
  io_detail::put_le<std::uint64_t>(out, v.spec.seed);
  out.append(reinterpret_cast<const char*>(v.frames.data()), v.frames.size());
  out.append(reinterpret_cast<const char*>(v.masks.data()), v.masks.size());
  return out;
}

/// Parses a container. Generation-only spec fields (drift, sprite size) are not stored
/// and come back at their defaults.
inline SyntheticVideo decode_video(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const VideoHeader h = parse_video_header(p, bytes.size());
  if (bytes.size() < h.total_bytes()) {
    const std::size_t data = bytes.size() - kVideoHeaderBytes;
    const std::size_t fb = h.frame_bytes();
    std::string where = data < fb * h.frame_count ? "frame " + std::to_string(data / fb)
                                                  : "mask " + std::to_string((data - fb * h.frame_count) / h.mask_bytes());
    throw FormatError("video: truncated in " + where + " (expected " + std::to_string(h.total_bytes()) + " bytes)",
                      bytes.size());
  }
  if (bytes.size() > h.total_bytes()) throw FormatError("video: trailing bytes", h.total_bytes());
  SyntheticVideo v;
  v.spec.width = h.width;
  v.spec.height = h.height;
  v.spec.channels = h.channels;
  v.spec.frame_count = h.frame_count;
  v.spec.class_id = h.class_id;
  v.spec.seed = h.seed;
  const std::size_t nf = h.frame_bytes() * h.frame_count;
  v.frames.assign(p + kVideoHeaderBytes, p + kVideoHeaderBytes + nf);
  v.masks.assign(p + kVideoHeaderBytes + nf, p + kVideoHeaderBytes + nf + h.mask_bytes() * h.frame_count);
  return v;
}

inline void write_video(const SyntheticVideo& v, const std::filesystem::path& path) {
  io_detail::write_file(path, encode_video(v));
}

inline SyntheticVideo read_video(const std::filesystem::path& path) { return decode_video(io_detail::read_file(path)); }

inline VideoHeader read_video_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  unsigned char buf[kVideoHeaderBytes];
  is.read(reinterpret_cast<char*>(buf), kVideoHeaderBytes);
  return parse_video_header(buf, static_cast<std::size_t>(is.gcount()));
}

/// Random access to frames and masks of a container on disk.
class VideoFile {
 public:
  explicit VideoFile(const std::filesystem::path& path) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot open " + path.string());
    unsigned char buf[kVideoHeaderBytes];
    is_.read(reinterpret_cast<char*>(buf), kVideoHeaderBytes);
    header_ = parse_video_header(buf, static_cast<std::size_t>(is_.gcount()));
    const auto size = std::filesystem::file_size(path);
    if (size < header_.total_bytes())
      throw FormatError("video: truncated (expected " + std::to_string(header_.total_bytes()) + " bytes)", size);
  }

  const VideoHeader& header() const { return header_; }

  void read_frame(std::uint32_t t, std::span<std::uint8_t> out) {
    read_at(kVideoHeaderBytes + std::size_t{t} * header_.frame_bytes(), out.first(header_.frame_bytes()));
  }
  void read_mask(std::uint32_t t, std::span<std::uint8_t> out) {
    read_at(kVideoHeaderBytes + header_.frame_bytes() * header_.frame_count + std::size_t{t} * header_.mask_bytes(),
            out.first(header_.mask_bytes()));
  }

 private:
  void read_at(std::size_t offset, std::span<std::uint8_t> out) {
    is_.seekg(static_cast<std::streamoff>(offset));
    is_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (static_cast<std::size_t>(is_.gcount()) != out.size())
      throw FormatError("video: short read in " + path_.string(), offset + static_cast<std::size_t>(is_.gcount()));
  }

  std::filesystem::path path_;
  std::ifstream is_;
  VideoHeader header_;
};

// ---- manifest ---------------------------------------------------------------

enum class Split { train, test };

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::uint32_t class_id = 0;
  Split split = Split::train;
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  bool operator==(const Manifest&) const = default;
  std::vector<ManifestEntry> entries;

  void validate() const {
    std::set<std::string> seen;
    bool train = false, test = false;
    for (const auto& e : entries) {
      if (!seen.insert(e.path).second) throw ContractError("manifest: duplicate path " + e.path);
      (e.split == Split::train ? train : test) = true;
    }
    if (!train || !test) throw ContractError("manifest: both splits must be non-empty");
  }

  std::string to_string() const {
    std::string out;
    for (const auto& e : entries)
      out += e.path + "\t" + std::to_string(e.class_id) + "\t" + std::string(split_name(e.split)) + "\n";
    return out;
  }

  static Manifest parse(const std::string& text) {
    Manifest m;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0, offset = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t line_offset = offset;
      offset += line.size() + 1;
      if (line.empty()) continue;
      const auto t1 = line.find('\t'), t2 = line.find('\t', t1 == std::string::npos ? 0 : t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos)
        throw FormatError("manifest line " + std::to_string(lineno) + ": expected path<TAB>class<TAB>split", line_offset);
      ManifestEntry e;
      e.path = line.substr(0, t1);
      try {
        e.class_id = static_cast<std::uint32_t>(std::stoul(line.substr(t1 + 1, t2 - t1 - 1)));
      } catch (const std::exception&) {
        throw FormatError("manifest line " + std::to_string(lineno) + ": bad class id", line_offset);
      }
      const std::string split = line.substr(t2 + 1);
      if (split == "train")
        e.split = Split::train;
      else if (split == "test")
        e.split = Split::test;
      else
        throw FormatError("manifest line " + std::to_string(lineno) + ": bad split '" + split + "'", line_offset);
      m.entries.push_back(std::move(e));
    }
    return m;
  }
};

inline constexpr const char* kManifestName = "manifest.tsv";

inline Manifest read_manifest(const std::filesystem::path& path) { return Manifest::parse(io_detail::read_file(path)); }

/// Generation parameters shared by every video of a corpus.
struct CorpusSpec {
  std::uint32_t width = 64, height = 64, frame_count = 192, sprite_size = 12;
  double background_drift = 0.5;
  std::uint32_t num_classes = kNumMotionClasses;

  VideoSpec video(std::uint32_t class_id, std::uint64_t seed) const {
    VideoSpec s;
    s.width = width;
    s.height = height;
    s.frame_count = frame_count;
    s.sprite_size = sprite_size;
    s.background_drift = background_drift;
    s.class_id = class_id;
    s.seed = seed;
    return s;
  }
};

struct CorpusItem {
  std::string path;
  Split split;
  VideoSpec spec;
};

/// Class-balanced layout: item i of a split has class i % num_classes; the video seed is
/// base_seed + global index (train items first, then test).
inline std::vector<CorpusItem> corpus_layout(std::size_t num_train, std::size_t num_test, std::uint64_t base_seed,
                                             const CorpusSpec& cs = {}) {
  if (cs.num_classes == 0 || cs.num_classes > kNumMotionClasses)
    throw ContractError("corpus: num_classes must be in [1, 10]");
  if (num_train < cs.num_classes || num_test < cs.num_classes)
    throw ContractError("corpus: each split needs at least num_classes (" + std::to_string(cs.num_classes) +
                        ") videos");
  std::vector<CorpusItem> items;
  for (std::size_t i = 0; i < num_train + num_test; ++i) {
    const bool train = i < num_train;
    const std::size_t local = train ? i : i - num_train;
    char name[32];
    std::snprintf(name, sizeof(name), "%s/%06zu.vid", train ? "train" : "test", local);
    items.push_back({name, train ? Split::train : Split::test,
                     cs.video(static_cast<std::uint32_t>(local % cs.num_classes), base_seed + i)});
  }
  return items;
}

/// Writes every video and the manifest under out_dir.
inline Manifest build_corpus(std::size_t num_train, std::size_t num_test, std::uint64_t base_seed,
                             const std::filesystem::path& out_dir, const CorpusSpec& cs = {}, unsigned workers = 1) {
  const auto items = corpus_layout(num_train, num_test, base_seed, cs);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "train", ec);
  std::filesystem::create_directories(out_dir / "test", ec);
  if (ec || !std::filesystem::is_directory(out_dir / "test"))
    throw IoError("cannot create corpus directory " + out_dir.string());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < items.size(); i += stride) write_video(generate(items[i].spec), out_dir / items[i].path);
  };
  workers = std::max(1u, workers);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex mu;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w, workers);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
  }
  Manifest m;
  for (const auto& it : items) m.entries.push_back({it.path, it.spec.class_id, it.split});
  io_detail::write_file(out_dir / kManifestName, m.to_string());
  return m;
}

}  // namespace tssl
