#pragma once

#include <vector>

#include "tssl/batch.hpp"
#include "tssl/losses.hpp"
#include "tssl/metrics.hpp"
#include "tssl/model.hpp"

namespace tssl {

/// Loss terms and raw predictions of one batch.
template <class T>
struct PretextForward {
  LossParts<T> parts;
  Tensor<T> total;
  std::vector<double> ofl_scores;       // first view; per token (frame level) or per clip (clip level)
  std::vector<std::uint8_t> ofl_labels;
  std::vector<double> tsp_scores;       // rows of `classes` scores
  std::vector<std::size_t> tsp_labels;
  std::size_t classes = 0;

  double ofl_ap() const { return ofl_labels.empty() ? 0.0 : average_precision(ofl_scores, ofl_labels); }
  double tsp_top1() const {
    if (tsp_labels.empty()) return 0.0;
    const auto pred = argmax_rows(tsp_scores, classes);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == tsp_labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  }
};

/// Forward pass of every active objective on a batch. All frames go through the frame
/// encoder in one call; the OFL loss averages over both views when a second view exists.
template <class T>
PretextForward<T> pretext_forward(const ModelParams<T>& P, const Batch& b, const LossWeights& w,
                                  PretextTask task = PretextTask::frame_level, bool strict_c1 = false) {
  w.validate();
  const ModelConfig& c = P.config;
  const std::size_t B = b.clips, p = c.clip_len, d = c.frame_dim, fs = c.image_size * c.image_size * 3;
  if (b.clip_len != p) throw ContractError("pretext_forward: batch clip length differs from the model's");
  const bool use_ofl = w.ofl > 0, use_tsp = w.tsp > 0, use_c = w.contrastive > 0;
  const bool view1 = use_ofl || use_c, view2 = use_c || (use_ofl && !b.ofl_view2.empty());
  if ((view1 && b.ofl_view1.size() != B * p * fs) || (view2 && b.ofl_view2.size() != B * p * fs) ||
      (use_tsp && b.tsp_frames.size() != B * p * fs))
    throw ContractError("pretext_forward: batch lacks frames for the active objectives");

  std::vector<T> frames;
  auto append = [&](const std::vector<float>& v) { frames.insert(frames.end(), v.begin(), v.end()); };
  std::size_t n = 0, at_v1 = 0, at_v2 = 0, at_tsp = 0;
  if (view1) { at_v1 = n; append(b.ofl_view1); n += B * p; }
  if (view2) { at_v2 = n; append(b.ofl_view2); n += B * p; }
  if (use_tsp) { at_tsp = n; append(b.tsp_frames); n += B * p; }
  const Tensor<T> f = encode_frames(P, std::span<const T>(frames), n).cls;
  auto clips_of = [&](std::size_t at) { return reshape(slice(f, 0, at, at + B * p), {B, p, d}); };

  PretextForward<T> out;
  out.classes = c.skip_classes;
  auto copy = [](const Tensor<T>& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  if (use_ofl) {
    auto ofl_term = [&](std::size_t at, bool keep) {
      const Tensor<T> e = temporal_forward(P, clips_of(at));
      if (task == PretextTask::frame_level) {
        const Tensor<T> s = ofl_logits(P, e);
        if (keep) { out.ofl_scores = copy(s); out.ofl_labels = b.outlier; }
        return loss_ofl(s, std::span<const std::uint8_t>(b.outlier));
      }
      const Tensor<T> s = order_logits(P, e);
      if (keep) { out.ofl_scores = copy(s); out.ofl_labels = b.order_labels; }
      return loss_ofl(s, std::span<const std::uint8_t>(b.order_labels));
    };
    out.parts.ofl = ofl_term(at_v1, true);
    if (view2) out.parts.ofl = scale(add(out.parts.ofl, ofl_term(at_v2, false)), T(0.5));
  }
  if (use_tsp) {
    const Tensor<T> e = temporal_forward(P, clips_of(at_tsp));
    const Tensor<T> logits = task == PretextTask::frame_level ? tsp_logits(P, e) : rate_logits(P, e);
    out.tsp_labels = task == PretextTask::frame_level ? b.tsp_labels : b.rate_labels;
    out.tsp_scores = copy(logits);
    out.parts.tsp = loss_tsp(logits, out.tsp_labels);
  }
  if (use_c) {
    const Tensor<T> z1 = project(P, slice(f, 0, at_v1, at_v1 + B * p));
    const Tensor<T> z2 = project(P, slice(f, 0, at_v2, at_v2 + B * p));
    std::vector<std::size_t> ids(B * p);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i / p;
    out.parts.c1 = loss_c1(z1, z2, ids, w.temperature, strict_c1);
    out.parts.c2 = loss_c2(z1, z2, ids, w.temperature);
  }
  out.total = loss_combined(out.parts, w);
  return out;
}

/// BatchOptions consistent with a model and loss weighting.
inline BatchOptions batch_options_for(const ModelConfig& c, const LossWeights& w, BatchOptions base = {}) {
  base.image_size = c.image_size;
  base.ofl.clip_len = c.clip_len;
  base.need_ofl = w.ofl > 0 || w.contrastive > 0;
  base.need_tsp = w.tsp > 0;
  base.second_view = w.contrastive > 0;
  return base;
}

}  // namespace tssl
