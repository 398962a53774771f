#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tssl/augment.hpp"
#include "tssl/batch.hpp"
#include "tssl/checkpoint.hpp"
#include "tssl/corpus.hpp"
#include "tssl/errors.hpp"
#include "tssl/metrics.hpp"
#include "tssl/model.hpp"
#include "tssl/objective.hpp"
#include "tssl/rng.hpp"
#include "tssl/trainer.hpp"

namespace tssl {

enum class FeatureMode { static_only, temporal, fused };

inline const char* mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::static_only: return "static";
    case FeatureMode::temporal: return "temporal";
    case FeatureMode::fused: return "fused";
  }
  return "?";
}

inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "static") return FeatureMode::static_only;
  if (s == "temporal") return FeatureMode::temporal;
  if (s == "fused") return FeatureMode::fused;
  throw ConfigError("unknown feature mode '" + s + "' (static, temporal, fused)");
}

struct Perturbation {
  enum class Kind { none, gaussian, translation } kind = Kind::none;
  double sigma = 0.0;       // gaussian: per-pixel noise std on [0,1] intensities
  std::size_t pixels = 0;   // translation: max shift in model pixels
  std::uint64_t seed = 0;

  static Perturbation gaussian(double sigma, std::uint64_t seed = 0) { return {Kind::gaussian, sigma, 0, seed}; }
  static Perturbation translation(std::size_t px, std::uint64_t seed = 0) { return {Kind::translation, 0.0, px, seed}; }
  std::string name() const {
    switch (kind) {
      case Kind::gaussian: return "gaussian";
      case Kind::translation: return "translation";
      default: return "none";
    }
  }
};

struct FeatureOptions {
  FeatureMode mode = FeatureMode::fused;
  std::size_t delta = 4;
  Perturbation perturbation;
  bool shuffle_frames = false;  // permutes the clip's frames (diagnostic)
  std::size_t chunk = 16;       // videos per forward pass
};

/// Row-major matrix of per-video features.
struct FeatureMatrix {
  std::size_t rows = 0, dim = 0;
  std::vector<double> data;
  std::span<const double> row(std::size_t i) const { return std::span(data).subspan(i * dim, dim); }
};

namespace eval_detail {

// In-order clip centered in the video.
inline std::vector<std::size_t> center_clip(std::size_t frame_count, std::size_t p, std::size_t delta) {
  const std::size_t span = (p - 1) * delta + 1;
  if (frame_count < span) throw ContractError("evaluation clip does not fit in a " + std::to_string(frame_count) + "-frame video");
  return in_order_indices((frame_count - span) / 2, p, delta);
}

inline void perturb_frame(std::span<float> f, std::size_t size, const Perturbation& pt, Rng& rng) {
  if (pt.kind == Perturbation::Kind::gaussian) {
    for (auto& v : f) v = static_cast<float>(std::clamp(v + pt.sigma * rng.normal(), 0.0, 1.0));
  } else if (pt.kind == Perturbation::Kind::translation && pt.pixels > 0) {
    const auto m = static_cast<std::int64_t>(pt.pixels);
    const std::int64_t dx = rng.uniform_int(-m, m), dy = rng.uniform_int(-m, m);
    const std::vector<float> src(f.begin(), f.end());
    const auto n = static_cast<std::int64_t>(size);
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x) {
        const std::int64_t sx = std::clamp<std::int64_t>(x - dx, 0, n - 1), sy = std::clamp<std::int64_t>(y - dy, 0, n - 1);
        for (int c = 0; c < 3; ++c) f[static_cast<std::size_t>((y * n + x) * 3 + c)] = src[static_cast<std::size_t>((sy * n + sx) * 3 + c)];
      }
  }
}

inline std::vector<float> render_eval_clip(const Corpus& corpus, std::size_t video, const ModelConfig& mc,
                                           const FeatureOptions& o) {
  const auto& v = corpus[video];
  auto ts = center_clip(v.frame_count, mc.clip_len, o.delta);
  if (o.shuffle_frames) {
    Rng r = Rng(o.perturbation.seed).split(video).split(1);
    r.shuffle(std::span(ts));
  }
  Rng unused(0);
  std::vector<float> out = augment(corpus.frames(video, ts), ts.size(), v.width, v.height, mc.image_size,
                                   AugmentPolicy::none(), unused);
  if (o.perturbation.kind != Perturbation::Kind::none) {
    const std::size_t fb = mc.image_size * mc.image_size * 3;
    Rng base = Rng(o.perturbation.seed).split(video);
    for (std::size_t f = 0; f < ts.size(); ++f) {
      Rng r = base.split(2 + f);
      perturb_frame(std::span(out).subspan(f * fb, fb), mc.image_size, o.perturbation, r);
    }
  }
  return out;
}

inline void l2_normalize_in_place(std::span<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0)
    for (auto& x : v) x /= n;
}

}  // namespace eval_detail

/// Fixed features for each listed video from the centered in-order clip, no augmentation.
/// static = mean of frame features, temporal = mean of temporal tokens, fused = both
/// L2-normalized and concatenated.
template <class T>
FeatureMatrix extract_features(const ModelParams<T>& P, const Corpus& corpus, const std::vector<std::size_t>& videos,
                               const FeatureOptions& o = {}) {
  using namespace eval_detail;
  const ModelConfig& c = P.config;
  const std::size_t p = c.clip_len, df = c.frame_dim, de = c.temporal_dim;
  FeatureMatrix m;
  m.rows = videos.size();
  m.dim = o.mode == FeatureMode::static_only ? df : o.mode == FeatureMode::temporal ? de : df + de;
  m.data.resize(m.rows * m.dim);
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < videos.size(); begin += o.chunk) {
    const std::size_t end = std::min(videos.size(), begin + o.chunk), n = end - begin;
    std::vector<T> frames;
    for (std::size_t i = begin; i < end; ++i) {
      const auto clip = render_eval_clip(corpus, videos[i], c, o);
      frames.insert(frames.end(), clip.begin(), clip.end());
    }
    const Tensor<T> f = reshape(encode_frames(P, std::span<const T>(frames), n * p).cls, {n, p, df});
    const Tensor<T> fs = mean_axis(f, 1);
    Tensor<T> es;
    if (o.mode != FeatureMode::static_only) es = mean_axis(temporal_forward(P, f), 1);
    for (std::size_t i = 0; i < n; ++i) {
      std::span<double> row = std::span(m.data).subspan((begin + i) * m.dim, m.dim);
      std::size_t at = 0;
      if (o.mode != FeatureMode::temporal) {
        for (std::size_t k = 0; k < df; ++k) row[at + k] = static_cast<double>(fs[i * df + k]);
        if (o.mode == FeatureMode::fused) l2_normalize_in_place(row.subspan(0, df));
        at = df;
      }
      if (o.mode != FeatureMode::static_only) {
        for (std::size_t k = 0; k < de; ++k) row[at + k] = static_cast<double>(es[i * de + k]);
        if (o.mode == FeatureMode::fused) l2_normalize_in_place(row.subspan(at, de));
      }
    }
  }
  return m;
}

inline std::vector<std::size_t> labels_of(const Corpus& corpus, const std::vector<std::size_t>& videos) {
  std::vector<std::size_t> y;
  for (auto v : videos) y.push_back(corpus[v].class_id);
  return y;
}

// ---- retrieval ----------------------------------------------------------------------

/// Cosine nearest-neighbour retrieval; R@k is the fraction of queries with a same-class
/// item among the k nearest search items (ties go to the lower search index).
inline std::vector<double> retrieval_recall(const FeatureMatrix& query, const std::vector<std::size_t>& query_labels,
                                            const FeatureMatrix& search, const std::vector<std::size_t>& search_labels,
                                            const std::vector<std::size_t>& ks = {1, 5}) {
  if (query.rows == 0 || search.rows == 0) throw ContractError("retrieval: empty query or search set");
  if (query.dim != search.dim) throw DimensionError("retrieval: feature dimensions differ");
  if (query_labels.size() != query.rows || search_labels.size() != search.rows)
    throw ContractError("retrieval: label count differs from feature rows");
  for (auto k : ks)
    if (k == 0 || k > search.rows)
      throw ContractError("retrieval: k=" + std::to_string(k) + " exceeds search size " + std::to_string(search.rows));
  auto normalized = [](const FeatureMatrix& m) {
    FeatureMatrix n = m;
    for (std::size_t i = 0; i < n.rows; ++i) eval_detail::l2_normalize_in_place(std::span(n.data).subspan(i * n.dim, n.dim));
    return n;
  };
  const FeatureMatrix q = normalized(query), s = normalized(search);
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  std::vector<double> hits(ks.size(), 0.0), sim(s.rows);
  std::vector<std::size_t> order(s.rows);
  for (std::size_t i = 0; i < q.rows; ++i) {
    const auto a = q.row(i);
    for (std::size_t j = 0; j < s.rows; ++j) {
      const auto b = s.row(j);
      sim[j] = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kmax), order.end(),
                      [&](std::size_t x, std::size_t y) { return sim[x] > sim[y] || (sim[x] == sim[y] && x < y); });
    for (std::size_t t = 0; t < ks.size(); ++t)
      for (std::size_t r = 0; r < ks[t]; ++r)
        if (search_labels[order[r]] == query_labels[i]) {
          hits[t] += 1;
          break;
        }
  }
  for (auto& h : hits) h /= static_cast<double>(q.rows);
  return hits;
}

// ---- linear probe -------------------------------------------------------------------

struct ProbeOptions {
  double lr = 1e-3;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_top1 = 0, test_top1 = 0;
};

/// Multinomial logistic regression on z-scored features (statistics from the train set),
/// trained with Adam from zero weights.
inline ProbeResult linear_probe(const FeatureMatrix& train, const std::vector<std::size_t>& ytrain,
                                const FeatureMatrix& test, const std::vector<std::size_t>& ytest,
                                const ProbeOptions& o = {}) {
  if (train.rows == 0 || test.rows == 0) throw ContractError("linear_probe: empty feature set");
  if (train.dim != test.dim) throw DimensionError("linear_probe: feature dimensions differ");
  if (ytrain.size() != train.rows || ytest.size() != test.rows) throw ContractError("linear_probe: label count mismatch");
  const std::size_t classes = 1 + std::max(*std::max_element(ytrain.begin(), ytrain.end()),
                                           *std::max_element(ytest.begin(), ytest.end()));
  if (std::all_of(ytrain.begin(), ytrain.end(), [&](std::size_t y) { return y == ytrain[0]; }))
    throw ContractError("linear_probe: training labels contain a single class");
  const std::size_t d = train.dim, n = train.rows;
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mu[k] += train.data[i * d + k] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) sd[k] += std::pow(train.data[i * d + k] - mu[k], 2) / static_cast<double>(n);
  for (auto& s : sd) s = s > 1e-24 ? std::sqrt(s) : 1.0;
  auto standardize = [&](const FeatureMatrix& m) {
    std::vector<double> z(m.data.size());
    for (std::size_t i = 0; i < m.rows; ++i)
      for (std::size_t k = 0; k < d; ++k) z[i * d + k] = (m.data[i * d + k] - mu[k]) / sd[k];
    return z;
  };
  const std::vector<double> ztr = standardize(train), zte = standardize(test);
  // Weights [(d + 1) x classes], last row is the bias.
  std::vector<double> w((d + 1) * classes, 0.0), m1(w.size(), 0.0), m2(w.size(), 0.0), g(w.size());
  std::vector<double> logits(classes);
  auto scores = [&](const std::vector<double>& z, std::size_t i) {
    for (std::size_t c = 0; c < classes; ++c) logits[c] = w[d * classes + c];
    for (std::size_t k = 0; k < d; ++k) {
      const double x = z[i * d + k];
      for (std::size_t c = 0; c < classes; ++c) logits[c] += x * w[k * classes + c];
    }
  };
  Rng rng(o.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    for (std::size_t begin = 0; begin < n; begin += o.batch_size) {
      const std::size_t end = std::min(n, begin + o.batch_size);
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t r = begin; r < end; ++r) {
        const std::size_t i = order[r];
        scores(ztr, i);
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t c = 0; c < classes; ++c) {
          const double delta = (logits[c] / z - (c == ytrain[i] ? 1.0 : 0.0)) / static_cast<double>(end - begin);
          for (std::size_t k = 0; k < d; ++k) g[k * classes + c] += delta * ztr[i * d + k];
          g[d * classes + c] += delta;
        }
      }
      ++step;
      const double c1 = 1 - std::pow(b1, static_cast<double>(step)), c2 = 1 - std::pow(b2, static_cast<double>(step));
      for (std::size_t j = 0; j < w.size(); ++j) {
        m1[j] = b1 * m1[j] + (1 - b1) * g[j];
        m2[j] = b2 * m2[j] + (1 - b2) * g[j] * g[j];
        w[j] -= o.lr * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + eps);
      }
    }
  }
  auto accuracy = [&](const std::vector<double>& z, const std::vector<std::size_t>& y) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      scores(z, i);
      ok += static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == y[i];
    }
    return static_cast<double>(ok) / static_cast<double>(y.size());
  };
  return {accuracy(ztr, ytrain), accuracy(zte, ytest)};
}

// ---- pretext metrics ----------------------------------------------------------------

struct PretextMetrics {
  double ofl_map = 0;          // AP over all pooled tokens (clip level: over clips)
  double ofl_map_per_clip = 0; // AP averaged over clips that contain an outlier (frame level only)
  double ofl_accuracy = 0;     // thresholded at logit 0
  double tsp_top1 = 0;
};

/// Pretext performance on `clips` clips drawn from `pool` with a fixed seed, using the
/// batch options (input condition) the model was trained under.
template <class T>
PretextMetrics pretext_metrics(const ModelParams<T>& P, const Corpus& corpus, const std::vector<std::size_t>& pool,
                               BatchOptions bo, PretextTask task, std::size_t clips = 256, std::uint64_t seed = 0,
                               std::size_t batch_size = 16) {
  const LossWeights w{1, 1, 0};
  bo = batch_options_for(P.config, w, bo);
  bo.task = task;
  batch_size = std::min(batch_size, pool.size());
  std::vector<double> ofl_scores;
  std::vector<std::uint8_t> ofl_labels;
  std::size_t tsp_ok = 0, tsp_n = 0;
  NoGradGuard guard;
  const Rng root(seed);
  for (std::size_t i = 0, done = 0; done < clips; ++i, done += batch_size) {
    const Batch b = build_batch(corpus, pool, batch_size, bo, root.split(i));
    const PretextForward<T> fwd = pretext_forward(P, b, w, task);
    ofl_scores.insert(ofl_scores.end(), fwd.ofl_scores.begin(), fwd.ofl_scores.end());
    ofl_labels.insert(ofl_labels.end(), fwd.ofl_labels.begin(), fwd.ofl_labels.end());
    const auto pred = argmax_rows(fwd.tsp_scores, fwd.classes);
    for (std::size_t k = 0; k < pred.size(); ++k) tsp_ok += pred[k] == fwd.tsp_labels[k];
    tsp_n += pred.size();
  }
  PretextMetrics m;
  m.ofl_map = average_precision(ofl_scores, ofl_labels);
  if (task == PretextTask::frame_level) m.ofl_map_per_clip = average_precision_per_group(ofl_scores, ofl_labels, P.config.clip_len);
  std::size_t ok = 0;
  for (std::size_t k = 0; k < ofl_scores.size(); ++k) ok += (ofl_scores[k] > 0) == (ofl_labels[k] != 0);
  m.ofl_accuracy = static_cast<double>(ok) / static_cast<double>(ofl_scores.size());
  m.tsp_top1 = static_cast<double>(tsp_ok) / static_cast<double>(tsp_n);
  return m;
}

// ---- shortcut probe -----------------------------------------------------------------

struct ShortcutCondition {
  bool patch_input = false;
  bool framewise_aug = true;
  std::string name() const {
    return std::string(patch_input ? "patch" : "full") + (framewise_aug ? "/framewise" : "/consistent");
  }
};

inline std::vector<ShortcutCondition> shortcut_conditions() {
  return {{false, false}, {true, false}, {false, true}, {true, true}};
}

struct ShortcutRow {
  ShortcutCondition condition;
  PretextMetrics metrics;
  double ofl_drop = 0, tsp_drop = 0;  // patch rows: relative change against the matching full row
};

/// Batch options of a shortcut condition on top of a base training configuration.
inline TrainConfig shortcut_train_config(TrainConfig tc, const ShortcutCondition& c, std::size_t patch_size) {
  tc.weights.contrastive = 0.0;
  tc.batch.policy.framewise_enabled = c.framewise_aug;
  tc.batch.patch_window = c.patch_input ? patch_size : 0;
  return tc;
}

/// Trains OFL+TSP only (fresh model per condition, identical budgets) and evaluates the
/// pretext tasks on held-out videos under each condition's own input pipeline.
template <class T>
std::vector<ShortcutRow> shortcut_probe(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& base,
                                        std::size_t patch_size = 16, std::size_t eval_clips = 256,
                                        const std::vector<ShortcutCondition>& conditions = shortcut_conditions()) {
  std::vector<ShortcutRow> rows;
  const auto eval_pool = corpus.indices(Split::test);
  for (const auto& c : conditions) {
    TrainConfig tc = shortcut_train_config(base, c, patch_size);
    if (!base.checkpoint_dir.empty()) {
      std::string tag = c.name();
      std::replace(tag.begin(), tag.end(), '/', '_');
      tc.checkpoint_dir = base.checkpoint_dir / tag;
    }
    const TrainResult<T> r = train<T>(corpus, mc, tc);
    ShortcutRow row{c, pretext_metrics(r.params, corpus, eval_pool, tc.batch, tc.task, eval_clips, base.seed + 1), 0, 0};
    rows.push_back(row);
  }
  for (auto& r : rows) {
    if (!r.condition.patch_input) continue;
    for (const auto& f : rows)
      if (!f.condition.patch_input && f.condition.framewise_aug == r.condition.framewise_aug) {
        r.ofl_drop = f.metrics.ofl_map > 0 ? r.metrics.ofl_map / f.metrics.ofl_map - 1.0 : 0.0;
        r.tsp_drop = f.metrics.tsp_top1 > 0 ? r.metrics.tsp_top1 / f.metrics.tsp_top1 - 1.0 : 0.0;
      }
  }
  return rows;
}

// ---- perturbation robustness --------------------------------------------------------

struct PerturbationResult {
  double clean_r1 = 0, perturbed_r1 = 0, relative_drop = 0;
};

/// R@1 on clean features against R@1 with both query and search videos perturbed.
template <class T>
PerturbationResult perturbation_eval(const ModelParams<T>& P, const Corpus& corpus, const std::vector<std::size_t>& query,
                                     const std::vector<std::size_t>& search, const Perturbation& pt,
                                     FeatureOptions o = {}) {
  o.perturbation = {};
  const auto ys = labels_of(corpus, search), yq = labels_of(corpus, query);
  PerturbationResult r;
  r.clean_r1 = retrieval_recall(extract_features(P, corpus, query, o), yq, extract_features(P, corpus, search, o), ys, {1})[0];
  if (pt.kind == Perturbation::Kind::none) {
    r.perturbed_r1 = r.clean_r1;
  } else {
    o.perturbation = pt;
    r.perturbed_r1 =
        retrieval_recall(extract_features(P, corpus, query, o), yq, extract_features(P, corpus, search, o), ys, {1})[0];
  }
  r.relative_drop = r.clean_r1 > 0 ? (r.clean_r1 - r.perturbed_r1) / r.clean_r1 : 0.0;
  return r;
}

// ---- mask propagation ---------------------------------------------------------------

struct PropagationOptions {
  std::size_t top_k = 5;
  double temperature = 0.07;
  std::size_t delta = 4;
};

/// Propagates soft labels frame to frame: each token of frame t takes the softmax-weighted
/// (over cosine / temperature) labels of its top-k most similar tokens in frame t-1.
/// `features` is [frames][tokens][dim]; returns [frames][tokens] labels.
inline std::vector<std::vector<double>> propagate_labels(const std::vector<std::vector<double>>& features,
                                                         std::size_t tokens, std::size_t dim,
                                                         const std::vector<double>& first,
                                                         const PropagationOptions& o = {}) {
  if (features.empty() || first.size() != tokens) throw DimensionError("propagate_labels: bad label grid");
  const std::size_t k = std::min(o.top_k, tokens);
  auto unit = [&](const std::vector<double>& f) {
    std::vector<double> u = f;
    for (std::size_t t = 0; t < tokens; ++t) eval_detail::l2_normalize_in_place(std::span(u).subspan(t * dim, dim));
    return u;
  };
  std::vector<std::vector<double>> labels{first};
  std::vector<double> prev = unit(features[0]), sim(tokens);
  std::vector<std::size_t> order(tokens);
  for (std::size_t f = 1; f < features.size(); ++f) {
    const std::vector<double> cur = unit(features[f]);
    std::vector<double> out(tokens, 0.0);
    for (std::size_t i = 0; i < tokens; ++i) {
      for (std::size_t j = 0; j < tokens; ++j)
        sim[j] = std::inner_product(cur.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                    cur.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim),
                                    prev.begin() + static_cast<std::ptrdiff_t>(j * dim), 0.0);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
      double z = 0, acc = 0;
      for (std::size_t r = 0; r < k; ++r) {
        const double wgt = std::exp((sim[order[r]] - sim[order[0]]) / o.temperature);
        z += wgt;
        acc += wgt * labels.back()[order[r]];
      }
      out[i] = acc / z;
    }
    labels.push_back(std::move(out));
    prev = cur;
  }
  return labels;
}

struct PropagationResult {
  std::vector<std::vector<std::uint8_t>> masks;  // frames 0..p-1 at source resolution
  std::vector<double> iou;                       // frames 1..p-1
  std::vector<double> grid_iou;                  // frames 1..p-1
  double mean_iou = 0, mean_grid_iou = 0;
};

namespace eval_detail {

// Fraction of foreground pixels per patch cell.
inline std::vector<double> mask_to_grid(std::span<const std::uint8_t> mask, std::size_t w, std::size_t h, std::size_t g) {
  std::vector<double> out(g * g, 0.0), count(g * g, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t cell = (y * g / h) * g + x * g / w;
      out[cell] += mask[y * w + x];
      count[cell] += 1;
    }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = count[i] > 0 ? out[i] / count[i] : 0.0;
  return out;
}

// Bilinear upsampling of a soft grid (cell centers) to pixels, thresholded at 0.5.
inline std::vector<std::uint8_t> grid_to_mask(const std::vector<double>& grid, std::size_t g, std::size_t w, std::size_t h) {
  std::vector<std::uint8_t> out(w * h);
  auto coord = [&](std::size_t px, std::size_t n) {
    return std::clamp((static_cast<double>(px) + 0.5) * static_cast<double>(g) / static_cast<double>(n) - 0.5, 0.0,
                      static_cast<double>(g - 1));
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = coord(x, w), gy = coord(y, h);
      const auto x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
      const std::size_t x1 = std::min(x0 + 1, g - 1), y1 = std::min(y0 + 1, g - 1);
      const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
      const double v = (grid[y0 * g + x0] * (1 - fx) + grid[y0 * g + x1] * fx) * (1 - fy) +
                       (grid[y1 * g + x0] * (1 - fx) + grid[y1 * g + x1] * fx) * fy;
      out[y * w + x] = v >= 0.5 ? 1 : 0;
    }
  return out;
}

template <class A, class B>
double iou(const std::vector<A>& a, const std::vector<B>& b, double threshold = 0.5) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = static_cast<double>(a[i]) >= threshold, y = static_cast<double>(b[i]) >= threshold;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace eval_detail

/// Propagates the first frame's mask through a rendered clip (frames at model resolution,
/// masks at source resolution w x h) using patch-token affinities of the frame encoder.
template <class T>
PropagationResult propagate_clip(const ModelParams<T>& P, std::span<const float> frames,
                                 std::span<const std::uint8_t> masks, std::size_t w, std::size_t h,
                                 const PropagationOptions& o = {}) {
  using namespace eval_detail;
  const ModelConfig& c = P.config;
  const std::size_t mb = w * h, g = c.grid(), np = c.num_patches(), d = c.frame_dim;
  const std::size_t n = frames.size() / (c.image_size * c.image_size * 3);
  if (n < 2 || masks.size() != n * mb) throw DimensionError("propagate_clip: frames and masks disagree");
  if (std::none_of(masks.begin(), masks.begin() + static_cast<std::ptrdiff_t>(mb), [](std::uint8_t m) { return m != 0; }))
    throw ContractError("propagate_mask: first-frame mask is empty");
  std::vector<std::vector<double>> feats;
  {
    NoGradGuard guard;
    const std::vector<T> input(frames.begin(), frames.end());
    const Tensor<T> patches = encode_frames(P, std::span<const T>(input), n).patches;
    for (std::size_t f = 0; f < n; ++f) {
      const auto data = patches.data().subspan(f * np * d, np * d);
      feats.emplace_back(data.begin(), data.end());
    }
  }
  const auto labels = propagate_labels(feats, np, d, mask_to_grid(masks.subspan(0, mb), w, h, g), o);
  PropagationResult r;
  for (std::size_t f = 0; f < n; ++f) {
    r.masks.push_back(grid_to_mask(labels[f], g, w, h));
    if (f == 0) continue;
    const auto truth = masks.subspan(f * mb, mb);
    r.iou.push_back(iou(r.masks.back(), std::vector<std::uint8_t>(truth.begin(), truth.end())));
    r.grid_iou.push_back(iou(labels[f], mask_to_grid(truth, w, h, g)));
  }
  r.mean_iou = std::accumulate(r.iou.begin(), r.iou.end(), 0.0) / static_cast<double>(r.iou.size());
  r.mean_grid_iou = std::accumulate(r.grid_iou.begin(), r.grid_iou.end(), 0.0) / static_cast<double>(r.grid_iou.size());
  return r;
}

/// Mask propagation over the centered evaluation clip of one video.
template <class T>
PropagationResult propagate_mask(const ModelParams<T>& P, const Corpus& corpus, std::size_t video,
                                 const PropagationOptions& o = {}) {
  const auto& v = corpus[video];
  FeatureOptions fo;
  fo.delta = o.delta;
  const auto ts = eval_detail::center_clip(v.frame_count, P.config.clip_len, o.delta);
  const std::vector<float> frames = eval_detail::render_eval_clip(corpus, video, P.config, fo);
  const auto masks = corpus.masks(video, ts);
  return propagate_clip(P, std::span<const float>(frames), std::span<const std::uint8_t>(masks), v.width, v.height, o);
}

// ---- reports ------------------------------------------------------------------------

struct ReportRow {
  std::string experiment, condition, metric;
  double value = 0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kReportHeader = "experiment,condition,metric,value,seed";

struct ExperimentReport {
  std::vector<ReportRow> rows;

  void add(std::string experiment, std::string condition, std::string metric, double value, std::uint64_t seed) {
    rows.push_back({std::move(experiment), std::move(condition), std::move(metric), value, seed});
  }

  std::string csv() const {
    std::string out = std::string(kReportHeader) + "\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.9g", r.value);
      out += r.experiment + "," + r.condition + "," + r.metric + "," + buf + "," + std::to_string(r.seed) + "\n";
    }
    return out;
  }

  void write(const std::filesystem::path& path) const { io_detail::write_file(path, csv()); }
};

/// Stores one feature row per video under "feat/<video path>".
inline void save_features(const FeatureMatrix& m, const Corpus& corpus, const std::vector<std::size_t>& videos,
                          const std::filesystem::path& path) {
  if (videos.size() != m.rows) throw ContractError("save_features: row count differs from video count");
  TensorArchive a;
  for (std::size_t i = 0; i < m.rows; ++i)
    a["feat/" + corpus[videos[i]].path] = TensorRecord::of<double>({m.dim}, m.row(i));
  save_archive(a, path);
}

}  // namespace tssl
