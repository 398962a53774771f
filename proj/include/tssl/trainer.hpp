#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "tssl/batch.hpp"
#include "tssl/checkpoint.hpp"
#include "tssl/losses.hpp"
#include "tssl/model.hpp"
#include "tssl/objective.hpp"

namespace tssl {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter name plus the update counter.
template <class T>
struct OptimState {
  std::map<std::string, std::vector<T>> m, v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update of every parameter that holds a gradient. All gradients
/// are checked before anything changes, so a non-finite gradient leaves the model intact.
template <class T>
void adam_step(ModelParams<T>& P, OptimState<T>& s, double lr, const AdamOptions& o = {}) {
  for (const auto& [name, t] : P.tensors)
    if (t.has_grad())
      for (T g : t.grad())
        if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in parameter " + name);
  ++s.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.step));
  for (auto& [name, t] : P.tensors) {
    if (!t.has_grad()) continue;
    auto& m = s.m[name];
    auto& v = s.v[name];
    if (m.size() != t.size()) m.assign(t.size(), T(0));
    if (v.size() != t.size()) v.assign(t.size(), T(0));
    const auto g = t.grad();
    auto x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      x[i] = static_cast<T>(x[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps));
    }
  }
}

/// Rescales all gradients so that their joint L2 norm is at most max_norm; returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(ModelParams<T>& P, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : P.tensors)
    if (t.has_grad())
      for (T g : t.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, t] : P.tensors)
      if (t.has_grad())
        for (auto& g : t.mutable_grad()) g = static_cast<T>(g * f);
  }
  return norm;
}

struct ScheduleOptions {
  double base_lr = 1e-4;
  std::size_t warmup_epochs = 5;
  double factor = 0.5;
  std::size_t patience = 3;
  double min_lr = 1e-6;
};

/// Monitored validation loss history reduced to what the schedule needs.
struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::size_t reductions = 0;

  void observe(double value, std::size_t patience) {
    if (value < best) {
      best = value;
      bad_epochs = 0;
      return;
    }
    if (++bad_epochs >= patience) {
      ++reductions;
      bad_epochs = 0;
    }
  }
};

/// Linear warmup from 0 to base_lr over the warmup epochs, then base_lr halved once per
/// plateau, never below min_lr.
inline double scheduled_lr(const ScheduleOptions& o, std::size_t epoch, std::size_t step_in_epoch,
                           std::size_t steps_per_epoch, const PlateauState& plateau) {
  if (epoch < o.warmup_epochs) {
    const double done = static_cast<double>(epoch * steps_per_epoch + step_in_epoch);
    return o.base_lr * done / static_cast<double>(o.warmup_epochs * steps_per_epoch);
  }
  return std::max(o.min_lr, o.base_lr * std::pow(o.factor, static_cast<double>(plateau.reductions)));
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::size_t eval_every = 1;
  std::filesystem::path checkpoint_dir;  // empty: keep everything in memory
  bool freeze_frame_encoder = false;
  ScheduleOptions schedule;
  AdamOptions adam;
  double grad_clip = 1.0;
  double val_fraction = 0.1;
  std::size_t steps_per_epoch = 0;  // 0: one pass, i.e. ceil(train videos / (2 * batch_size))
  BatchOptions batch;               // sampler and augmentation settings
  PretextTask task = PretextTask::frame_level;
  bool strict_c1 = false;
  unsigned workers = 1;  // >1 builds the next batch while the current one trains
  bool verbose = false;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (!(schedule.base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("val_fraction must be in [0, 1)");
    weights.validate();
  }
};

inline const char* kMetricsHeader = "step,epoch,lr,loss_total,loss_ofl,loss_tsp,loss_c1,loss_c2,ofl_map,tsp_top1";

struct MetricsRow {
  std::size_t step = 0, epoch = 0;
  double lr = 0, total = 0;
  double ofl = NAN, tsp = NAN, c1 = NAN, c2 = NAN;  // NaN: term inactive (written as an empty field)
  double ofl_map = NAN, tsp_top1 = NAN;

  std::string csv() const {
    auto f = [](double v) {
      if (std::isnan(v)) return std::string();
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      return std::string(buf);
    };
    return std::to_string(step) + "," + std::to_string(epoch) + "," + f(lr) + "," + f(total) + "," + f(ofl) + "," +
           f(tsp) + "," + f(c1) + "," + f(c2) + "," + f(ofl_map) + "," + f(tsp_top1);
  }
};

/// Train/validation split of a corpus' training videos: a fixed seeded 10% slice is held out.
struct DataSplit {
  std::vector<std::size_t> fit, val;
};

inline DataSplit split_train(const Corpus& corpus, double val_fraction) {
  std::vector<std::size_t> ids = corpus.indices(Split::train);
  Rng rng(0x7A11D);
  rng.shuffle(std::span(ids));
  const auto n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(ids.size())));
  DataSplit s;
  s.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.fit.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.fit.begin(), s.fit.end());
  return s;
}

template <class T>
struct TrainResult {
  ModelParams<T> params;
  OptimState<T> optim;
  PlateauState plateau;
  std::vector<MetricsRow> rows;
  std::vector<double> val_losses;  // one per completed epoch
  std::size_t epochs_done = 0;
};

// ---- checkpoints with optimizer state ------------------------------------------------

template <class T>
TensorArchive training_archive(const TrainResult<T>& r) {
  TensorArchive a;
  store_params(r.params, a);
  for (const auto& [name, m] : r.optim.m) a["opt/m/" + name] = TensorRecord::of<T>({m.size()}, std::span<const T>(m));
  for (const auto& [name, v] : r.optim.v) a["opt/v/" + name] = TensorRecord::of<T>({v.size()}, std::span<const T>(v));
  const std::vector<double> state{static_cast<double>(r.optim.step), static_cast<double>(r.epochs_done), r.plateau.best,
                                  static_cast<double>(r.plateau.bad_epochs), static_cast<double>(r.plateau.reductions)};
  a["state/train"] = TensorRecord::of<double>({state.size()}, std::span<const double>(state));
  if (!r.val_losses.empty())
    a["state/val_losses"] = TensorRecord::of<double>({r.val_losses.size()}, std::span<const double>(r.val_losses));
  return a;
}

template <class T>
TrainResult<T> restore_training(const TensorArchive& a) {
  TrainResult<T> r;
  r.params = restore_params<T>(a);
  for (const auto& [key, rec] : a) {
    if (key.rfind("opt/m/", 0) == 0) r.optim.m[key.substr(6)] = rec.template values<T>();
    if (key.rfind("opt/v/", 0) == 0) r.optim.v[key.substr(6)] = rec.template values<T>();
  }
  const auto it = a.find("state/train");
  if (it != a.end()) {
    const auto s = it->second.values<double>();
    if (s.size() != 5) throw FormatError("checkpoint state/train has wrong size", 0);
    r.optim.step = static_cast<std::uint64_t>(s[0]);
    r.epochs_done = static_cast<std::size_t>(s[1]);
    r.plateau.best = s[2];
    r.plateau.bad_epochs = static_cast<std::size_t>(s[3]);
    r.plateau.reductions = static_cast<std::size_t>(s[4]);
  }
  const auto vl = a.find("state/val_losses");
  if (vl != a.end()) r.val_losses = vl->second.values<double>();
  return r;
}

template <class T>
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) s += r.csv() + "\n";
  io_detail::write_file(path, s);
}

namespace trainer_detail {

inline BatchOptions effective_batch_options(const ModelConfig& mc, const TrainConfig& tc) {
  BatchOptions o = batch_options_for(mc, tc.weights, tc.batch);
  o.task = tc.task;
  return o;
}

}  // namespace trainer_detail

/// Mean combined loss over fixed validation batches (no augmentation randomness across
/// epochs: batch k always uses the same stream).
template <class T>
double validation_loss(const ModelParams<T>& P, const Corpus& corpus, const std::vector<std::size_t>& val,
                       const TrainConfig& tc) {
  if (val.size() < 2) return NAN;
  NoGradGuard guard;
  const BatchOptions bo = trainer_detail::effective_batch_options(P.config, tc);
  const std::size_t bs = std::min(tc.batch_size, val.size());
  const std::size_t batches = std::max<std::size_t>(1, (val.size() + 2 * bs - 1) / (2 * bs));
  const Rng root = Rng(tc.seed).split(0xFA11DA7E);
  double total = 0;
  for (std::size_t k = 0; k < batches; ++k) {
    const Batch b = build_batch(corpus, val, bs, bo, root.split(k));
    total += static_cast<double>(pretext_forward(P, b, tc.weights, tc.task, tc.strict_c1).total.item());
  }
  return total / static_cast<double>(batches);
}

/// Runs (or resumes) pretraining. Step s always draws its batch from Rng(seed).split(s),
/// so a run resumed from an epoch checkpoint follows the uninterrupted trajectory exactly.
template <class T>
TrainResult<T> train(const Corpus& corpus, const ModelConfig& mc, const TrainConfig& tc,
                     const TensorArchive* resume = nullptr) {
  tc.validate();
  const DataSplit split = split_train(corpus, tc.val_fraction);
  if (split.fit.size() < tc.batch_size)
    throw ConfigError("batch_size " + std::to_string(tc.batch_size) + " exceeds " + std::to_string(split.fit.size()) +
                      " training videos");
  TrainResult<T> r = resume ? restore_training<T>(*resume) : TrainResult<T>{init_params<T>(mc, tc.seed), {}, {}, {}, {}, 0};
  if (r.params.config != mc) throw ConfigError("resume checkpoint was trained with a different model config");
  if (tc.freeze_frame_encoder)
    for (auto& [name, t] : r.params.tensors)
      if (name.rfind("frame.", 0) == 0) t.set_requires_grad(false);

  const BatchOptions bo = trainer_detail::effective_batch_options(mc, tc);
  const std::size_t steps_per_epoch =
      tc.steps_per_epoch ? tc.steps_per_epoch
                         : std::max<std::size_t>(1, (split.fit.size() + 2 * tc.batch_size - 1) / (2 * tc.batch_size));
  const Rng root(tc.seed);
  auto make_batch = [&](std::size_t step) { return build_batch(corpus, split.fit, tc.batch_size, bo, root.split(step)); };
  const bool on_disk = !tc.checkpoint_dir.empty();
  if (on_disk) std::filesystem::create_directories(tc.checkpoint_dir);
  auto save = [&](const std::string& name) {
    if (on_disk) save_archive(training_archive(r), tc.checkpoint_dir / name);
  };
  if (resume && on_disk && std::filesystem::exists(tc.checkpoint_dir / "metrics.csv")) {
    // Keep the rows logged before the checkpoint.
    const std::string text = io_detail::read_file(tc.checkpoint_dir / "metrics.csv");
    std::size_t pos = text.find('\n') + 1;
    while (pos < text.size()) {
      const std::size_t end = text.find('\n', pos);
      const std::string line = text.substr(pos, end - pos);
      pos = end == std::string::npos ? text.size() : end + 1;
      if (line.empty()) continue;
      MetricsRow row;
      std::vector<std::string> f;
      std::size_t a = 0;
      for (std::size_t b; (b = line.find(',', a)) != std::string::npos; a = b + 1) f.push_back(line.substr(a, b - a));
      f.push_back(line.substr(a));
      auto num = [](const std::string& s) { return s.empty() ? NAN : std::stod(s); };
      if (f.size() != 10) throw FormatError("malformed metrics row", pos);
      row.step = std::stoull(f[0]);
      if (row.step >= r.optim.step) break;
      row.epoch = std::stoull(f[1]);
      row.lr = num(f[2]);
      row.total = num(f[3]);
      row.ofl = num(f[4]);
      row.tsp = num(f[5]);
      row.c1 = num(f[6]);
      row.c2 = num(f[7]);
      row.ofl_map = num(f[8]);
      row.tsp_top1 = num(f[9]);
      r.rows.push_back(row);
    }
  }
  if (!resume) save("init.ckpt");

  const auto t0 = std::chrono::steady_clock::now();
  std::future<Batch> next;
  for (std::size_t epoch = r.epochs_done; epoch < tc.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t step = epoch * steps_per_epoch + s;
      Batch b;
      if (next.valid()) {
        b = next.get();
      } else {
        b = make_batch(step);
      }
      const bool last = epoch + 1 == tc.epochs && s + 1 == steps_per_epoch;
      if (tc.workers > 1 && !last) next = std::async(std::launch::async, make_batch, step + 1);
      const double lr = scheduled_lr(tc.schedule, epoch, s, steps_per_epoch, r.plateau);
      r.params.zero_grad();
      PretextForward<T> fwd;
      double total = NAN;
      try {
        fwd = pretext_forward(r.params, b, tc.weights, tc.task, tc.strict_c1);
        total = static_cast<double>(fwd.total.item());
        if (!std::isfinite(total)) throw NumericalError("non-finite loss at step " + std::to_string(step));
        backward(fwd.total);
        clip_grad_norm(r.params, tc.grad_clip);
        adam_step(r.params, r.optim, lr, tc.adam);
      } catch (const NumericalError&) {
        if (next.valid()) next.wait();
        save("last_good.ckpt");
        if (on_disk) write_metrics_csv<T>(r.rows, tc.checkpoint_dir / "metrics.csv");
        throw;
      }
      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.lr = lr;
      row.total = total;
      auto val = [](const Tensor<T>& t) { return t.defined() ? static_cast<double>(t.item()) : NAN; };
      row.ofl = val(fwd.parts.ofl);
      row.tsp = val(fwd.parts.tsp);
      row.c1 = val(fwd.parts.c1);
      row.c2 = val(fwd.parts.c2);
      if (!fwd.ofl_labels.empty()) row.ofl_map = fwd.ofl_ap();
      if (!fwd.tsp_labels.empty()) row.tsp_top1 = fwd.tsp_top1();
      r.rows.push_back(row);
      if (tc.verbose && (s % 10 == 0 || s + 1 == steps_per_epoch)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "epoch %zu step %zu/%zu lr %.3g loss %.4f (%.0fs)\n", epoch, s + 1, steps_per_epoch, lr,
                     total, secs);
      }
    }
    const double vl = validation_loss(r.params, corpus, split.val, tc);
    r.val_losses.push_back(vl);
    if (epoch + 1 >= tc.schedule.warmup_epochs && std::isfinite(vl)) r.plateau.observe(vl, tc.schedule.patience);
    r.epochs_done = epoch + 1;
    if (tc.eval_every && r.epochs_done % tc.eval_every == 0 && r.epochs_done < tc.epochs)
      save("epoch" + std::to_string(r.epochs_done) + ".ckpt");
  }
  if (tc.freeze_frame_encoder) r.params.set_requires_grad(true);
  save("final.ckpt");
  if (on_disk) write_metrics_csv<T>(r.rows, tc.checkpoint_dir / "metrics.csv");
  return r;
}

}  // namespace tssl
