#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tssl/eval.hpp"
#include "tssl/trainer.hpp"
#include "tssl/video_io.hpp"

namespace tssl {

struct ConfigKey {
  const char* name;
  const char* default_value;
  const char* help;
};

/// Every recognized key, in the order resolved.cfg lists them.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      // corpus
      {"corpus", "", "directory holding manifest.tsv; empty renders the corpus procedurally"},
      {"train_videos", "2000", "procedural corpus: training videos"},
      {"test_videos", "500", "procedural corpus: test videos"},
      {"corpus_seed", "7", "procedural corpus: base video seed"},
      {"num_classes", "10", "motion classes in a generated corpus"},
      {"video_size", "64", "generated frame width and height"},
      {"frame_count", "192", "frames per generated video"},
      {"sprite_size", "12", "sprite edge length in pixels"},
      {"background_drift", "0.5", "background drift in px/frame"},
      // model
      {"image_size", "64", "model input resolution"},
      {"patch_size", "8", "frame encoder patch size"},
      {"frame_dim", "64", "frame encoder width"},
      {"frame_depth", "4", "frame encoder blocks"},
      {"frame_heads", "4", "frame encoder attention heads"},
      {"temporal_dim", "64", "temporal encoder width"},
      {"temporal_depth", "3", "temporal encoder blocks"},
      {"temporal_heads", "4", "temporal encoder attention heads"},
      {"clip_len", "8", "frames per clip"},
      {"proj_hidden", "64", "contrastive projection hidden width"},
      {"proj_out", "32", "contrastive projection output width"},
      {"mlp_ratio", "4", "transformer MLP expansion"},
      // training
      {"seed", "0", "training seed"},
      {"epochs", "10", "pretraining epochs"},
      {"batch_size", "16", "clips per task per step"},
      {"steps_per_epoch", "0", "0 means one pass over the training videos"},
      {"lr", "1e-4", "base learning rate"},
      {"warmup_epochs", "5", "linear warmup length"},
      {"plateau_factor", "0.5", "learning rate multiplier on a plateau"},
      {"patience", "3", "epochs without validation improvement before a reduction"},
      {"min_lr", "1e-6", "learning rate floor"},
      {"grad_clip", "1.0", "global gradient norm limit (0 disables)"},
      {"val_fraction", "0.1", "share of training videos held out for the plateau monitor"},
      {"eval_every", "1", "epochs between checkpoints"},
      {"lambda_ofl", "1", "weight of the out-of-order localization loss"},
      {"lambda_tsp", "1", "weight of the skip-rate loss"},
      {"lambda_c", "1", "weight of the contrastive losses"},
      {"temperature", "0.1", "contrastive temperature"},
      {"strict_c1", "false", "exclude the positive from the frame contrastive denominator"},
      {"freeze_frame_encoder", "false", "train only the reducer, temporal encoder and heads"},
      {"task", "frame", "pretext granularity: frame or clip"},
      {"workers", "1", "threads for corpus generation and batch prefetch"},
      {"verbose", "false", "progress lines on stderr"},
      // sampler and augmentation
      {"delta", "4", "in-order frame spacing"},
      {"max_distance", "64", "replacement window radius (inf for unrestricted)"},
      {"replacement", "window", "replacement mode: window, before_after or min_distance"},
      {"rho_min", "0", "lower bound of the outlier ratio"},
      {"rho_max", "0.5", "upper bound of the outlier ratio"},
      {"skip_set", "1,4,8", "skip rates for the playback task"},
      {"crop", "true", "clip-consistent random crop"},
      {"crop_area", "0.7", "mean retained area of the consistent crop"},
      {"color_jitter", "true", "clip-consistent color jitter"},
      {"flip_prob", "0.5", "clip-consistent horizontal flip probability"},
      {"grayscale_prob", "0.2", "grayscale probability inside color jitter"},
      {"framewise", "true", "independent per-frame crop"},
      {"framewise_area", "0.8", "mean retained area of the per-frame crop"},
      {"framewise_jitter", "false", "per-frame color jitter"},
      {"framewise_flip", "false", "per-frame horizontal flip"},
      {"patch_window", "0", "train on a fixed-size source window per clip (0 = full frame)"},
      // evaluation
      {"checkpoint", "", "checkpoint to evaluate"},
      {"out", "run", "output directory"},
      {"feature_mode", "fused", "static, temporal or fused"},
      {"eval_delta", "4", "frame spacing of evaluation clips"},
      {"probe_lr", "1e-3", "linear probe learning rate"},
      {"probe_epochs", "100", "linear probe epochs"},
      {"probe_batch", "32", "linear probe batch size"},
      {"eval_seed", "0", "seed for evaluation randomness"},
      {"eval_clips", "256", "clips scored by the pretext metrics"},
      {"shortcut_patch", "16", "source window edge of the patch-input condition"},
      {"perturbation", "gaussian", "none, gaussian or translation"},
      {"sigma", "0.1", "gaussian perturbation std"},
      {"shift_pixels", "4", "translation perturbation range"},
      {"propagate_videos", "50", "held-out videos scored by mask propagation"},
      {"propagate_top_k", "5", "neighbors per propagated token"},
      {"propagate_temperature", "0.07", "softmax temperature of the propagation vote"},
      {"study", "objectives", "ablation family: objectives, rho, distance, skip, clip_level, features"},
      {"rows", "", "comma-separated row labels of the study (empty = all)"},
  };
  return keys;
}

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace config_detail

/// Flat key=value run configuration. Starts from the defaults; files and flags overwrite.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) {
    const auto& ks = config_keys();
    return std::any_of(ks.begin(), ks.end(), [&](const ConfigKey& k) { return key == k.name; });
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Applies "key = value" lines; '#' starts a comment.
  void merge_text(std::string_view text, const std::string& source = "config") {
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      const std::string body = config_detail::trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
      const std::string key = config_detail::trim(std::string_view(body).substr(0, eq));
      if (!known(key)) throw ConfigError(source + ":" + std::to_string(line_no) + ": unknown config key '" + key + "'");
      values_[key] = config_detail::trim(std::string_view(body).substr(eq + 1));
    }
  }

  void merge_file(const std::filesystem::path& path) { merge_text(io_detail::read_file(path), path.string()); }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) bad(key, "a non-negative integer");
    return x;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(x)) bad(key, "a finite number");
      return x;
    } catch (const std::logic_error&) {
      bad(key, "a finite number");
    }
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad(key, "a boolean");
  }

  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : config_detail::split_list(str(key))) {
      std::size_t x = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      if (ec != std::errc() || p != item.data() + item.size()) bad(key, "a comma-separated list of integers");
      out.push_back(x);
    }
    return out;
  }

  std::vector<std::string> list(const std::string& key) const { return config_detail::split_list(str(key)); }

  /// Every key except the output location, so runs written to different directories
  /// produce the same file.
  std::string to_string() const {
    std::string out;
    for (const auto& k : config_keys())
      if (std::string_view(k.name) != "out") out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    return out;
  }

  void write(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    io_detail::write_file(dir / "resolved.cfg", to_string());
  }

  CorpusSpec corpus_spec() const {
    CorpusSpec cs;
    cs.width = cs.height = static_cast<std::uint32_t>(size("video_size"));
    cs.frame_count = static_cast<std::uint32_t>(size("frame_count"));
    cs.sprite_size = static_cast<std::uint32_t>(size("sprite_size"));
    cs.background_drift = real("background_drift");
    cs.num_classes = static_cast<std::uint32_t>(size("num_classes"));
    return cs;
  }

  ModelConfig model() const {
    ModelConfig c;
    c.image_size = size("image_size");
    c.patch_size = size("patch_size");
    c.frame_dim = size("frame_dim");
    c.frame_depth = size("frame_depth");
    c.frame_heads = size("frame_heads");
    c.temporal_dim = size("temporal_dim");
    c.temporal_depth = size("temporal_depth");
    c.temporal_heads = size("temporal_heads");
    c.clip_len = size("clip_len");
    c.proj_hidden = size("proj_hidden");
    c.proj_out = size("proj_out");
    c.mlp_ratio = size("mlp_ratio");
    const auto skips = sizes("skip_set");
    c.skip_classes = std::max<std::size_t>(2, skips.size());
    c.validate();
    return c;
  }

  BatchOptions batch() const {
    BatchOptions b;
    b.ofl.clip_len = size("clip_len");
    b.ofl.delta = size("delta");
    b.ofl.max_distance = str("max_distance") == "inf" ? std::numeric_limits<std::size_t>::max() : size("max_distance");
    const std::string& mode = str("replacement");
    if (mode == "window") b.ofl.mode = ReplacementMode::window;
    else if (mode == "before_after") b.ofl.mode = ReplacementMode::before_after;
    else if (mode == "min_distance") b.ofl.mode = ReplacementMode::min_distance;
    else bad("replacement", "window, before_after or min_distance");
    b.ofl.rho_min = real("rho_min");
    b.ofl.rho_max = real("rho_max");
    if (b.ofl.rho_min < 0 || b.ofl.rho_max > 1 || b.ofl.rho_min > b.ofl.rho_max) bad("rho_max", "a range inside [0, 1]");
    b.skip_set = sizes("skip_set");
    for (auto s : b.skip_set)
      if (s == 0) bad("skip_set", "positive skip rates");
    b.image_size = size("image_size");
    b.policy.crop = flag("crop");
    b.policy.crop_area = real("crop_area");
    b.policy.color_jitter = flag("color_jitter");
    b.policy.flip_prob = real("flip_prob");
    b.policy.grayscale_prob = real("grayscale_prob");
    b.policy.framewise_enabled = flag("framewise");
    b.policy.framewise_area = real("framewise_area");
    b.policy.framewise_jitter = flag("framewise_jitter");
    b.policy.framewise_flip = flag("framewise_flip");
    b.patch_window = size("patch_window");
    return b;
  }

  TrainConfig train(const std::filesystem::path& checkpoint_dir = {}) const {
    TrainConfig tc;
    tc.seed = u64("seed");
    tc.epochs = size("epochs");
    tc.batch_size = size("batch_size");
    tc.steps_per_epoch = size("steps_per_epoch");
    tc.schedule.base_lr = real("lr");
    tc.schedule.warmup_epochs = size("warmup_epochs");
    tc.schedule.factor = real("plateau_factor");
    tc.schedule.patience = size("patience");
    tc.schedule.min_lr = real("min_lr");
    tc.grad_clip = real("grad_clip");
    tc.val_fraction = real("val_fraction");
    tc.eval_every = size("eval_every");
    tc.weights.ofl = real("lambda_ofl");
    tc.weights.tsp = real("lambda_tsp");
    tc.weights.contrastive = real("lambda_c");
    tc.weights.temperature = real("temperature");
    tc.strict_c1 = flag("strict_c1");
    tc.freeze_frame_encoder = flag("freeze_frame_encoder");
    const std::string& task = str("task");
    if (task == "frame") tc.task = PretextTask::frame_level;
    else if (task == "clip") tc.task = PretextTask::clip_level;
    else bad("task", "frame or clip");
    tc.workers = static_cast<unsigned>(std::max<std::size_t>(1, size("workers")));
    tc.verbose = flag("verbose");
    tc.batch = batch();
    if (tc.batch.skip_set.empty()) tc.weights.tsp = 0.0;
    tc.checkpoint_dir = checkpoint_dir;
    tc.validate();
    return tc;
  }

  FeatureOptions features() const {
    FeatureOptions o;
    try {
      o.mode = parse_feature_mode(str("feature_mode"));
    } catch (const ContractError&) {
      bad("feature_mode", "static, temporal or fused");
    }
    o.delta = size("eval_delta");
    return o;
  }

  ProbeOptions probe() const {
    ProbeOptions o;
    o.lr = real("probe_lr");
    o.epochs = size("probe_epochs");
    o.batch_size = size("probe_batch");
    o.seed = u64("eval_seed");
    return o;
  }

  Perturbation perturbation() const {
    const std::string& kind = str("perturbation");
    if (kind == "none") return {};
    if (kind == "gaussian") return Perturbation::gaussian(real("sigma"), u64("eval_seed"));
    if (kind == "translation") return Perturbation::translation(size("shift_pixels"), u64("eval_seed"));
    bad("perturbation", "none, gaussian or translation");
  }

  PropagationOptions propagation() const {
    PropagationOptions o;
    o.top_k = size("propagate_top_k");
    o.temperature = real("propagate_temperature");
    o.delta = size("eval_delta");
    return o;
  }

  /// The configured corpus: the manifest under `corpus`, or a procedurally rendered one.
  Corpus open_corpus() const {
    const std::string& dir = str("corpus");
    if (dir.empty()) return Corpus::procedural(size("train_videos"), size("test_videos"), u64("corpus_seed"), corpus_spec());
    const std::filesystem::path manifest = std::filesystem::path(dir) / kManifestName;
    if (!std::filesystem::exists(manifest)) throw IoError("no " + std::string(kManifestName) + " in " + dir);
    return Corpus::from_manifest(manifest);
  }

 private:
  [[noreturn]] void bad(const std::string& key, const std::string& expected) const {
    throw ConfigError("config key '" + key + "' = '" + values_.at(key) + "' is not " + expected);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace tssl
