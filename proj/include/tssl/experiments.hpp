#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tssl/config.hpp"

namespace tssl {

/// Writes resolved.cfg into `dir`, pretrains, and leaves metrics.csv plus checkpoints there.
/// An empty `dir` keeps everything in memory.
inline TrainResult<float> pretrain_run(const RunConfig& rc, const Corpus& corpus, const std::filesystem::path& dir) {
  if (!dir.empty()) rc.write(dir);
  return train<float>(corpus, rc.model(), rc.train(dir));
}

struct DownstreamScores {
  double probe_top1 = 0, probe_train_top1 = 0, r1 = 0, r5 = 0;
};

/// Linear probe and retrieval with test videos as queries and training videos as the
/// search set.
inline DownstreamScores downstream(const ModelParams<float>& P, const Corpus& corpus, const RunConfig& rc,
                                   FeatureOptions fo) {
  const auto train_ids = corpus.indices(Split::train), test_ids = corpus.indices(Split::test);
  const auto ytr = labels_of(corpus, train_ids), yte = labels_of(corpus, test_ids);
  const FeatureMatrix ftr = extract_features(P, corpus, train_ids, fo), fte = extract_features(P, corpus, test_ids, fo);
  DownstreamScores s;
  const ProbeResult pr = linear_probe(ftr, ytr, fte, yte, rc.probe());
  s.probe_top1 = pr.test_top1;
  s.probe_train_top1 = pr.train_top1;
  const std::size_t k5 = std::min<std::size_t>(5, train_ids.size());
  const auto r = retrieval_recall(fte, yte, ftr, ytr, {1, k5});
  s.r1 = r[0];
  s.r5 = r[1];
  return s;
}

/// Pretext metrics on test videos under the run's own input pipeline.
inline PretextMetrics pretext_scores(const ModelParams<float>& P, const Corpus& corpus, const RunConfig& rc) {
  const TrainConfig tc = rc.train();
  const BatchOptions bo = trainer_detail::effective_batch_options(P.config, tc);
  return pretext_metrics(P, corpus, corpus.indices(Split::test), bo, tc.task, rc.size("eval_clips"), rc.u64("eval_seed"));
}

/// Mean IoU of mask propagation over the first `propagate_videos` test videos.
inline double propagation_score(const ModelParams<float>& P, const Corpus& corpus, const RunConfig& rc) {
  const auto test_ids = corpus.indices(Split::test);
  const std::size_t n = std::min(rc.size("propagate_videos"), test_ids.size());
  if (n == 0) throw ConfigError("propagate_videos must be positive");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += propagate_mask(P, corpus, test_ids[i], rc.propagation()).mean_iou;
  return total / static_cast<double>(n);
}

// ---- ablation studies ---------------------------------------------------------------

struct AblationRow {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};

inline const std::vector<std::string>& ablation_studies() {
  static const std::vector<std::string> s = {"objectives", "rho", "distance", "skip", "clip_level", "features"};
  return s;
}

/// Row definitions per study. Rows of the "features" study share one pretraining run
/// and differ only in the evaluated feature mode.
inline std::vector<AblationRow> ablation_rows(const std::string& study) {
  using O = std::vector<std::pair<std::string, std::string>>;
  if (study == "objectives")
    return {{"a", O{{"lambda_ofl", "0"}, {"lambda_tsp", "0"}}},
            {"b", O{{"lambda_ofl", "0"}}},
            {"c", O{{"lambda_tsp", "0"}}},
            {"d", O{{"framewise", "false"}}},
            {"e", O{}}};
  if (study == "rho")
    return {{"a", O{{"rho_min", "0"}, {"rho_max", "0"}, {"lambda_ofl", "0"}}},
            {"b", O{{"rho_min", "0.25"}, {"rho_max", "0.25"}}},
            {"c", O{{"rho_min", "0.5"}, {"rho_max", "0.5"}}},
            {"d", O{{"rho_min", "0"}, {"rho_max", "0.25"}}},
            {"e", O{{"rho_min", "0"}, {"rho_max", "0.5"}}}};
  if (study == "distance")
    return {{"a", O{{"replacement", "window"}, {"max_distance", "inf"}}},
            {"b", O{{"replacement", "min_distance"}, {"max_distance", "8"}}},
            {"c", O{{"replacement", "window"}, {"max_distance", "8"}}},
            {"d", O{{"replacement", "window"}, {"max_distance", "64"}}}};
  if (study == "skip")
    return {{"a", O{{"skip_set", ""}, {"lambda_tsp", "0"}}},
            {"b", O{{"skip_set", "1,4"}}},
            {"c", O{{"skip_set", "2,4"}}},
            {"d", O{{"skip_set", "1,4,8"}}},
            {"e", O{{"skip_set", "2,4,8"}}}};
  if (study == "clip_level")
    return {{"ofl-clip", O{{"lambda_tsp", "0"}, {"task", "clip"}}},
            {"ofl-frame", O{{"lambda_tsp", "0"}}},
            {"tsp-clip", O{{"lambda_ofl", "0"}, {"task", "clip"}}},
            {"tsp-frame", O{{"lambda_ofl", "0"}}}};
  if (study == "features")
    return {{"static", O{{"feature_mode", "static"}}},
            {"temporal", O{{"feature_mode", "temporal"}}},
            {"fused", O{{"feature_mode", "fused"}}}};
  throw ConfigError("unknown study '" + study + "'");
}

inline std::vector<AblationRow> select_rows(const std::string& study, const std::vector<std::string>& labels) {
  const auto all = ablation_rows(study);
  if (labels.empty()) return all;
  std::vector<AblationRow> out;
  for (const auto& l : labels) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const AblationRow& r) { return r.label == l; });
    if (it == all.end()) throw ConfigError("study " + study + " has no row '" + l + "'");
    out.push_back(*it);
  }
  return out;
}

inline RunConfig with_overrides(RunConfig rc, const AblationRow& row) {
  for (const auto& [k, v] : row.overrides) rc.set(k, v);
  return rc;
}

/// Runs the selected rows of a study: one pretraining per row (one shared run for the
/// feature study), then probe, retrieval and pretext metrics on the test split.
inline ExperimentReport run_ablation(const RunConfig& base, const Corpus& corpus, const std::filesystem::path& out) {
  const std::string study = base.str("study");
  const auto rows = select_rows(study, base.list("rows"));
  const std::uint64_t seed = base.u64("seed");
  ExperimentReport report;
  auto record = [&](const std::string& label, const ModelParams<float>& P, const RunConfig& rc) {
    const DownstreamScores s = downstream(P, corpus, rc, rc.features());
    report.add(study, label, "probe_top1", s.probe_top1, seed);
    report.add(study, label, "r1", s.r1, seed);
    report.add(study, label, "r5", s.r5, seed);
  };
  auto record_pretext = [&](const std::string& label, const ModelParams<float>& P, const RunConfig& rc) {
    const TrainConfig tc = rc.train();
    const PretextMetrics m = pretext_scores(P, corpus, rc);
    if (tc.weights.ofl > 0) {
      report.add(study, label, "ofl_map", m.ofl_map, seed);
      report.add(study, label, "ofl_accuracy", m.ofl_accuracy, seed);
    }
    if (tc.weights.tsp > 0) report.add(study, label, "tsp_top1", m.tsp_top1, seed);
  };
  if (study == "features") {
    const auto P = pretrain_run(base, corpus, out.empty() ? out : out / "pretrain").params;
    for (const auto& row : rows) record(row.label, P, with_overrides(base, row));
  } else {
    for (const auto& row : rows) {
      const RunConfig rc = with_overrides(base, row);
      const auto P = pretrain_run(rc, corpus, out.empty() ? out : out / row.label).params;
      record(row.label, P, rc);
      record_pretext(row.label, P, rc);
    }
  }
  if (!out.empty()) report.write(out / "report.csv");
  return report;
}

}  // namespace tssl
