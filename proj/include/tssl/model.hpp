#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tssl/checkpoint.hpp"
#include "tssl/errors.hpp"
#include "tssl/ops.hpp"
#include "tssl/rng.hpp"
#include "tssl/tensor.hpp"

namespace tssl {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t frame_dim = 64;
  std::size_t frame_depth = 4;
  std::size_t frame_heads = 4;
  std::size_t temporal_dim = 64;
  std::size_t temporal_depth = 3;
  std::size_t temporal_heads = 4;
  std::size_t clip_len = 8;
  std::size_t proj_hidden = 64;
  std::size_t proj_out = 32;
  std::size_t skip_classes = 3;
  std::size_t mlp_ratio = 4;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) fail("image_size must be a multiple of patch_size");
    if (frame_dim == 0 || frame_heads == 0 || frame_dim % frame_heads != 0) fail("frame_dim must be divisible by frame_heads");
    if (temporal_dim == 0 || temporal_heads == 0 || temporal_dim % temporal_heads != 0)
      fail("temporal_dim must be divisible by temporal_heads");
    if (clip_len < 2) fail("clip_len must be at least 2");
    if (proj_hidden == 0 || proj_out == 0 || skip_classes < 2 || mlp_ratio == 0) fail("degenerate head sizes");
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter set. Names are stable and double as checkpoint keys.
template <class T>
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& operator[](const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : tensors) t.zero_grad();
  }

  void set_requires_grad(bool r) {
    for (auto& [_, t] : tensors) t.set_requires_grad(r);
  }
};

namespace model_detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001B3ULL;
  return h;
}

template <class T>
void add_block(std::map<std::string, Tensor<T>>& m, const std::string& p, std::size_t d, std::size_t hidden) {
  m[p + ".ln1.g"] = Tensor<T>::full({d}, T(1));
  m[p + ".ln1.b"] = Tensor<T>::zeros({d});
  for (const char* w : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
    m[p + w + ".w"] = Tensor<T>::zeros({d, d});
    m[p + w + ".b"] = Tensor<T>::zeros({d});
  }
  m[p + ".ln2.g"] = Tensor<T>::full({d}, T(1));
  m[p + ".ln2.b"] = Tensor<T>::zeros({d});
  m[p + ".mlp.fc1.w"] = Tensor<T>::zeros({d, hidden});
  m[p + ".mlp.fc1.b"] = Tensor<T>::zeros({hidden});
  m[p + ".mlp.fc2.w"] = Tensor<T>::zeros({hidden, d});
  m[p + ".mlp.fc2.b"] = Tensor<T>::zeros({d});
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Pre-norm transformer block over groups of `seq` rows.
template <class T>
Tensor<T> block(const ModelParams<T>& P, const std::string& p, const Tensor<T>& x, std::size_t seq, std::size_t heads) {
  const Tensor<T> h = layer_norm(x, P[p + ".ln1.g"], P[p + ".ln1.b"]);
  const Tensor<T> q = linear(h, P[p + ".attn.q.w"], P[p + ".attn.q.b"]);
  const Tensor<T> k = linear(h, P[p + ".attn.k.w"], P[p + ".attn.k.b"]);
  const Tensor<T> v = linear(h, P[p + ".attn.v.w"], P[p + ".attn.v.b"]);
  const Tensor<T> a = linear(attention(q, k, v, seq, heads), P[p + ".attn.o.w"], P[p + ".attn.o.b"]);
  const Tensor<T> x1 = add(x, a);
  const Tensor<T> h2 = layer_norm(x1, P[p + ".ln2.g"], P[p + ".ln2.b"]);
  const Tensor<T> m = linear(gelu(linear(h2, P[p + ".mlp.fc1.w"], P[p + ".mlp.fc1.b"])), P[p + ".mlp.fc2.w"], P[p + ".mlp.fc2.b"]);
  return add(x1, m);
}

}  // namespace model_detail

/// Fresh parameters: truncated normal weight matrices with std 1/sqrt(fan_in), std 0.02
/// embeddings, unit/zero layer norms, zero biases, zero task heads. Each tensor draws from its own stream keyed
/// by name, so adding a parameter never perturbs the others.
template <class T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  using namespace model_detail;
  c.validate();
  ModelParams<T> P;
  P.config = c;
  auto& m = P.tensors;
  const std::size_t df = c.frame_dim, de = c.temporal_dim;
  m["frame.patch.w"] = Tensor<T>::zeros({c.patch_dim(), df});
  m["frame.patch.b"] = Tensor<T>::zeros({df});
  m["frame.cls"] = Tensor<T>::zeros({1, df});
  m["frame.pos"] = Tensor<T>::zeros({c.num_patches() + 1, df});
  for (std::size_t i = 0; i < c.frame_depth; ++i) add_block(m, "frame.block" + std::to_string(i), df, df * c.mlp_ratio);
  m["frame.ln.g"] = Tensor<T>::full({df}, T(1));
  m["frame.ln.b"] = Tensor<T>::zeros({df});
  m["reducer.w"] = Tensor<T>::zeros({df, de});
  m["reducer.b"] = Tensor<T>::zeros({de});
  m["temporal.pos"] = Tensor<T>::zeros({c.clip_len, de});
  for (std::size_t i = 0; i < c.temporal_depth; ++i)
    add_block(m, "temporal.block" + std::to_string(i), de, de * c.mlp_ratio);
  m["temporal.ln.g"] = Tensor<T>::full({de}, T(1));
  m["temporal.ln.b"] = Tensor<T>::zeros({de});
  m["head.ofl.w"] = Tensor<T>::zeros({de, 1});
  m["head.ofl.b"] = Tensor<T>::zeros({1});
  m["head.tsp.w"] = Tensor<T>::zeros({de, c.skip_classes});
  m["head.tsp.b"] = Tensor<T>::zeros({c.skip_classes});
  m["head.order.w"] = Tensor<T>::zeros({de, 1});
  m["head.order.b"] = Tensor<T>::zeros({1});
  m["head.rate.w"] = Tensor<T>::zeros({de, c.skip_classes});
  m["head.rate.b"] = Tensor<T>::zeros({c.skip_classes});
  m["proj.fc1.w"] = Tensor<T>::zeros({df, c.proj_hidden});
  m["proj.fc1.b"] = Tensor<T>::zeros({c.proj_hidden});
  m["proj.fc2.w"] = Tensor<T>::zeros({c.proj_hidden, c.proj_out});
  m["proj.fc2.b"] = Tensor<T>::zeros({c.proj_out});

  const Rng root(seed);
  for (auto& [name, t] : m) {
    const bool random = name.rfind("head.", 0) != 0 &&
                        (ends_with(name, ".w") || name == "frame.cls" || ends_with(name, ".pos"));
    if (random) {
      Rng rng = root.split(name_hash(name));
      auto v = t.mutable_data();
      // At 0.02 the class token swamps the patch signal at small widths and nothing trains.
      const double sd = ends_with(name, ".w") ? 1.0 / std::sqrt(static_cast<double>(t.dim(0))) : 0.02;
      for (auto& x : v) x = static_cast<T>(rng.truncated_normal(sd));
    }
    t.set_requires_grad(true);
  }
  return P;
}

// Pixels in [0,1] are centred and scaled to roughly unit spread before the patch embedding.
inline constexpr double kPixelScale = 4.0;

/// Rearranges frames [n, H, W, 3] into normalized patch rows [n * patches, ps*ps*3].
template <class T>
std::vector<T> patchify(const ModelConfig& c, std::span<const T> frames, std::size_t n) {
  const std::size_t s = c.image_size, ps = c.patch_size, g = c.grid(), pd = c.patch_dim();
  if (frames.size() != n * s * s * 3)
    throw DimensionError("encode_frames: expected " + std::to_string(n) + " frames of " + std::to_string(s) + "x" +
                         std::to_string(s) + "x3, got " + std::to_string(frames.size()) + " values");
  std::vector<T> out(n * g * g * pd);
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* dst = out.data() + ((f * g + gy) * g + gx) * pd;
        for (std::size_t y = 0; y < ps; ++y) {
          const T* src = frames.data() + ((f * s + gy * ps + y) * s + gx * ps) * 3;
          for (std::size_t q = 0; q < ps * 3; ++q) dst[y * ps * 3 + q] = (src[q] - T(0.5)) * T(kPixelScale);
        }
      }
  return out;
}

template <class T>
struct FrameEncoding {
  Tensor<T> cls;      // [n, d_f]
  Tensor<T> patches;  // [n, patches, d_f]
};

/// Frame encoder applied to every frame independently.
template <class T>
FrameEncoding<T> encode_frames(const ModelParams<T>& P, std::span<const T> frames, std::size_t n) {
  const ModelConfig& c = P.config;
  const std::size_t np = c.num_patches(), d = c.frame_dim;
  const Tensor<T> x = Tensor<T>::from({n, np, c.patch_dim()}, patchify(c, frames, n));
  const Tensor<T> tokens = linear(x, P["frame.patch.w"], P["frame.patch.b"]);
  const Tensor<T> cls = repeat_leading(P["frame.cls"], n);
  Tensor<T> h = add_trailing(concat<T>({cls, tokens}, 1), P["frame.pos"]);
  h = reshape(h, {n * (np + 1), d});
  for (std::size_t i = 0; i < c.frame_depth; ++i)
    h = model_detail::block(P, "frame.block" + std::to_string(i), h, np + 1, c.frame_heads);
  h = reshape(layer_norm(h, P["frame.ln.g"], P["frame.ln.b"]), {n, np + 1, d});
  return {reshape(slice(h, 1, 0, 1), {n, d}), slice(h, 1, 1, np + 1)};
}

/// Temporal encoder over clips: f is [clips, p, d_f] (or [p, d_f]); returns e with
/// the same leading shape and d_e columns.
template <class T>
Tensor<T> temporal_forward(const ModelParams<T>& P, const Tensor<T>& f) {
  const ModelConfig& c = P.config;
  if (f.rank() < 2 || f.dim(f.rank() - 2) != c.clip_len || f.shape().back() != c.frame_dim)
    throw ContractError("temporal_forward: expected [..., " + std::to_string(c.clip_len) + ", " +
                        std::to_string(c.frame_dim) + "] tokens, got " + shape_str(f.shape()));
  Tensor<T> h = add_trailing(gelu(linear(f, P["reducer.w"], P["reducer.b"])), P["temporal.pos"]);
  for (std::size_t i = 0; i < c.temporal_depth; ++i)
    h = model_detail::block(P, "temporal.block" + std::to_string(i), h, c.clip_len, c.temporal_heads);
  return layer_norm(h, P["temporal.ln.g"], P["temporal.ln.b"]);
}

/// Per-token out-of-order scores: e [..., p, d_e] -> [..., p].
template <class T>
Tensor<T> ofl_logits(const ModelParams<T>& P, const Tensor<T>& e) {
  Shape s(e.shape().begin(), e.shape().end() - 1);
  return reshape(linear(e, P["head.ofl.w"], P["head.ofl.b"]), s);
}

/// Skip-class scores on consecutive token differences: e [..., p, d_e] -> [..., p-1, classes].
template <class T>
Tensor<T> tsp_logits(const ModelParams<T>& P, const Tensor<T>& e) {
  const std::size_t axis = e.rank() - 2, p = e.dim(axis);
  const Tensor<T> diff = sub(slice(e, axis, 1, p), slice(e, axis, 0, p - 1));
  return linear(diff, P["head.tsp.w"], P["head.tsp.b"]);
}

/// Whole-clip heads used by the clip-level baselines; inputs pool e over the clip axis.
template <class T>
Tensor<T> order_logits(const ModelParams<T>& P, const Tensor<T>& e) {
  const Tensor<T> pooled = mean_axis(e, e.rank() - 2);
  Shape s(pooled.shape().begin(), pooled.shape().end() - 1);
  if (s.empty()) s = {1};
  return reshape(linear(pooled, P["head.order.w"], P["head.order.b"]), s);
}

template <class T>
Tensor<T> rate_logits(const ModelParams<T>& P, const Tensor<T>& e) {
  return linear(mean_axis(e, e.rank() - 2), P["head.rate.w"], P["head.rate.b"]);
}

/// Projection MLP (linear, ReLU, linear) followed by L2 normalization of each row.
template <class T>
Tensor<T> project(const ModelParams<T>& P, const Tensor<T>& f) {
  const Tensor<T> h = relu(linear(f, P["proj.fc1.w"], P["proj.fc1.b"]));
  return l2_normalize(linear(h, P["proj.fc2.w"], P["proj.fc2.b"]));
}

// ---- checkpoints --------------------------------------------------------------------

inline constexpr const char* kConfigKeys[] = {"image_size",     "patch_size",     "frame_dim", "frame_depth",
                                              "frame_heads",    "temporal_dim",   "temporal_depth",
                                              "temporal_heads", "clip_len",       "proj_hidden",
                                              "proj_out",       "skip_classes",   "mlp_ratio"};

inline std::vector<std::size_t*> config_fields(ModelConfig& c) {
  return {&c.image_size,     &c.patch_size, &c.frame_dim,   &c.frame_depth, &c.frame_heads,
          &c.temporal_dim,   &c.temporal_depth, &c.temporal_heads, &c.clip_len, &c.proj_hidden,
          &c.proj_out,       &c.skip_classes, &c.mlp_ratio};
}

/// Parameters under "param/<name>" plus the architecture under "config/<key>".
template <class T>
void store_params(const ModelParams<T>& P, TensorArchive& archive) {
  ModelConfig c = P.config;
  const auto fields = config_fields(c);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const double v = static_cast<double>(*fields[i]);
    archive["config/" + std::string(kConfigKeys[i])] = TensorRecord::of<double>({1}, std::span(&v, 1));
  }
  for (const auto& [name, t] : P.tensors) archive["param/" + name] = TensorRecord::of(t);
}

template <class T>
ModelParams<T> restore_params(const TensorArchive& archive) {
  ModelConfig c;
  const auto fields = config_fields(c);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto it = archive.find("config/" + std::string(kConfigKeys[i]));
    if (it == archive.end()) throw FormatError("checkpoint lacks config/" + std::string(kConfigKeys[i]), 0);
    *fields[i] = static_cast<std::size_t>(it->second.template values<double>().at(0));
  }
  ModelParams<T> P = init_params<T>(c, 0);
  for (auto& [name, t] : P.tensors) {
    const auto it = archive.find("param/" + name);
    if (it == archive.end()) throw FormatError("checkpoint lacks param/" + name, 0);
    if (it->second.shape != t.shape())
      throw FormatError("checkpoint shape mismatch for " + name + ": " + shape_str(it->second.shape), 0);
    t = it->second.template tensor<T>(true);
  }
  return P;
}

template <class T>
void save_params(const ModelParams<T>& P, const std::filesystem::path& path) {
  TensorArchive a;
  store_params(P, a);
  save_archive(a, path);
}

template <class T>
ModelParams<T> load_params(const std::filesystem::path& path) {
  return restore_params<T>(load_archive(path));
}

}  // namespace tssl
