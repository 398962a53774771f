#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/tensor.hpp"
#include "tssl/video_io.hpp"

namespace tssl {

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'S', 'L', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One named array as stored on disk; the payload is kept as raw little-endian bytes so
/// that a load/save cycle reproduces the file exactly.
struct TensorRecord {
  DType dtype = DType::f32;
  Shape shape;
  std::string bytes;

  bool operator==(const TensorRecord&) const = default;

  template <class T>
  static TensorRecord of(const Tensor<T>& t) {
    return of<T>(t.shape(), t.data());
  }

  template <class T>
  static TensorRecord of(const Shape& shape, std::span<const T> values) {
    TensorRecord r;
    r.dtype = dtype_of<T>();
    r.shape = shape;
    r.bytes.resize(values.size() * sizeof(T));
    std::memcpy(r.bytes.data(), values.data(), r.bytes.size());
    return r;
  }

  std::size_t element_size() const { return dtype == DType::f32 ? 4 : 8; }

  // Converts if the stored dtype differs from T.
  template <class T>
  std::vector<T> values() const {
    const std::size_t n = bytes.size() / element_size();
    std::vector<T> out(n);
    if (dtype == dtype_of<T>()) {
      std::memcpy(out.data(), bytes.data(), bytes.size());
    } else if (dtype == DType::f32) {
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, bytes.data() + 4 * i, 4);
        out[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, bytes.data() + 8 * i, 8);
        out[i] = static_cast<T>(v);
      }
    }
    return out;
  }

  template <class T>
  Tensor<T> tensor(bool requires_grad = false) const {
    return Tensor<T>::from(shape, values<T>(), requires_grad);
  }
};

using TensorArchive = std::map<std::string, TensorRecord>;

inline std::string encode_archive(const TensorArchive& archive) {
  using io_detail::put_le;
  std::string out(kCheckpointMagic, 8);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, rec] : archive) {
    if (rec.bytes.size() != numel(rec.shape) * rec.element_size())
      throw ContractError("checkpoint: payload of " + name + " does not match its shape");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(rec.dtype));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (auto d : rec.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out += rec.bytes;
  }
  return out;
}

inline TensorArchive decode_archive(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const std::string& what) {
    if (bytes.size() - pos < n) throw FormatError("checkpoint truncated in " + what, bytes.size());
  };
  auto u32 = [&](const std::string& what) {
    need(4, what);
    const auto v = io_detail::get_le<std::uint32_t>(reinterpret_cast<const unsigned char*>(bytes.data()) + pos);
    pos += 4;
    return v;
  };
  need(8, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw FormatError("bad checkpoint magic", 0);
  pos = 8;
  const std::size_t version_at = pos;
  if (u32("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t count = u32("tensor count");
  TensorArchive out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor " + std::to_string(i);
    const std::uint32_t len = u32(where + " name length");
    need(len, where + " name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    need(1, name + " dtype");
    const auto dt = static_cast<std::uint8_t>(bytes[pos]);
    if (dt > 1) throw FormatError("bad dtype for " + name, pos);
    ++pos;
    TensorRecord rec;
    rec.dtype = static_cast<DType>(dt);
    const std::uint32_t rank = u32(name + " rank");
    for (std::uint32_t r = 0; r < rank; ++r) rec.shape.push_back(u32(name + " dims"));
    const std::size_t n = numel(rec.shape) * rec.element_size();
    need(n, name + " payload");
    rec.bytes = bytes.substr(pos, n);
    pos += n;
    if (!out.emplace(std::move(name), std::move(rec)).second) throw FormatError("duplicate tensor name", pos);
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after checkpoint", pos);
  return out;
}

inline void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  io_detail::write_file(path, encode_archive(archive));
}

inline TensorArchive load_archive(const std::filesystem::path& path) { return decode_archive(io_detail::read_file(path)); }

}  // namespace tssl
