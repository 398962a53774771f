#include <CLI11.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "tssl/experiments.hpp"

namespace fs = std::filesystem;
using namespace tssl;

namespace {

enum ExitCode { kOk = 0, kConfigFailure = 2, kIoFailure = 3, kNumericalFailure = 4 };

struct KeyFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

// Every key becomes a --key flag; `aliases` adds extra names for some keys.
void register_keys(CLI::App* sub, KeyFlags& kf, const std::map<std::string, std::string>& aliases = {},
                   const std::vector<std::string>& skip = {}) {
  sub->add_option("--config", kf.config_file, "key=value file applied before the flags");
  for (const auto& k : config_keys()) {
    if (std::find(skip.begin(), skip.end(), k.name) != skip.end()) continue;
    std::string names = std::string("--") + k.name;
    if (const auto it = aliases.find(k.name); it != aliases.end()) names += ",--" + it->second;
    kf.options[k.name] = sub->add_option(names, kf.values[k.name], k.help)->default_str(k.default_value);
  }
}

RunConfig resolve(const KeyFlags& kf) {
  RunConfig rc;
  if (!kf.config_file.empty()) {
    if (!fs::exists(kf.config_file)) throw IoError("config file " + kf.config_file + " does not exist");
    rc.merge_file(kf.config_file);
  }
  for (const auto& [key, opt] : kf.options)
    if (opt->count() > 0) rc.set(key, kf.values.at(key));
  return rc;
}

fs::path out_dir(const RunConfig& rc) {
  const fs::path out = rc.str("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (!fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());
  return out;
}

ModelParams<float> load_model(const RunConfig& rc) {
  const std::string& ck = rc.str("checkpoint");
  if (ck.empty()) throw ConfigError("this command needs --checkpoint (a file, or 'init' for fresh parameters)");
  if (ck == "init") return init_params<float>(rc.model(), rc.u64("seed"));
  if (!fs::exists(ck)) throw IoError("checkpoint " + ck + " does not exist");
  return load_params<float>(ck);
}

int cmd_gen(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  const Manifest m = build_corpus(rc.size("train_videos"), rc.size("test_videos"), rc.u64("corpus_seed"), out,
                                  rc.corpus_spec(), static_cast<unsigned>(std::max<std::size_t>(1, rc.size("workers"))));
  rc.write(out);
  std::printf("wrote %zu videos and %s to %s\n", m.entries.size(), kManifestName, out.string().c_str());
  return kOk;
}

int cmd_pretrain(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  const Corpus corpus = rc.open_corpus();
  const auto r = pretrain_run(rc, corpus, out);
  const double last = r.rows.empty() ? NAN : r.rows.back().total;
  std::printf("trained %zu steps, final loss %.6g, checkpoint %s\n", r.rows.size(), last,
              (out / "final.ckpt").string().c_str());
  return kOk;
}

int cmd_probe(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const auto P = load_model(rc);
  const FeatureOptions fo = rc.features();
  const DownstreamScores s = downstream(P, corpus, rc, fo);
  ExperimentReport rep;
  rep.add("probe", mode_name(fo.mode), "probe_top1", s.probe_top1, rc.u64("seed"));
  rep.add("probe", mode_name(fo.mode), "probe_train_top1", s.probe_train_top1, rc.u64("seed"));
  rep.write(out / "probe.csv");
  std::printf("linear probe top-1 %.4f (train %.4f)\n", s.probe_top1, s.probe_train_top1);
  return kOk;
}

int cmd_retrieve(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const auto P = load_model(rc);
  const FeatureOptions fo = rc.features();
  const auto train_ids = corpus.indices(Split::train), test_ids = corpus.indices(Split::test);
  const FeatureMatrix ftr = extract_features(P, corpus, train_ids, fo), fte = extract_features(P, corpus, test_ids, fo);
  const auto r = retrieval_recall(fte, labels_of(corpus, test_ids), ftr, labels_of(corpus, train_ids),
                                  {1, std::min<std::size_t>(5, train_ids.size())});
  FeatureMatrix all{ftr.rows + fte.rows, ftr.dim, ftr.data};
  all.data.insert(all.data.end(), fte.data.begin(), fte.data.end());
  std::vector<std::size_t> ids = train_ids;
  ids.insert(ids.end(), test_ids.begin(), test_ids.end());
  save_features(all, corpus, ids, out / "features.ckpt");
  ExperimentReport rep;
  rep.add("retrieve", mode_name(fo.mode), "r1", r[0], rc.u64("seed"));
  rep.add("retrieve", mode_name(fo.mode), "r5", r[1], rc.u64("seed"));
  rep.write(out / "retrieval.csv");
  std::printf("R@1 %.4f R@5 %.4f\n", r[0], r[1]);
  return kOk;
}

int cmd_shortcut(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const auto rows = shortcut_probe<float>(corpus, rc.model(), rc.train(out), rc.size("shortcut_patch"), rc.size("eval_clips"));
  ExperimentReport rep;
  const auto seed = rc.u64("seed");
  for (const auto& r : rows) {
    const std::string c = r.condition.name();
    rep.add("shortcut", c, "ofl_map", r.metrics.ofl_map, seed);
    rep.add("shortcut", c, "tsp_top1", r.metrics.tsp_top1, seed);
    if (r.condition.patch_input) {
      rep.add("shortcut", c, "ofl_relative_change", r.ofl_drop, seed);
      rep.add("shortcut", c, "tsp_relative_change", r.tsp_drop, seed);
    }
    std::printf("%-20s ofl_map %.4f tsp_top1 %.4f\n", c.c_str(), r.metrics.ofl_map, r.metrics.tsp_top1);
  }
  rep.write(out / "report.csv");
  return kOk;
}

int cmd_ablate(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const ExperimentReport rep = run_ablation(rc, corpus, out);
  std::fputs(rep.csv().c_str(), stdout);
  return kOk;
}

int cmd_perturb(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const auto P = load_model(rc);
  const Perturbation pt = rc.perturbation();
  const auto r = perturbation_eval(P, corpus, corpus.indices(Split::test), corpus.indices(Split::train), pt, rc.features());
  ExperimentReport rep;
  const auto seed = rc.u64("seed");
  rep.add("perturb", pt.name(), "clean_r1", r.clean_r1, seed);
  rep.add("perturb", pt.name(), "perturbed_r1", r.perturbed_r1, seed);
  rep.add("perturb", pt.name(), "relative_drop", r.relative_drop, seed);
  rep.write(out / "perturb.csv");
  std::printf("R@1 clean %.4f perturbed %.4f relative drop %.4f\n", r.clean_r1, r.perturbed_r1, r.relative_drop);
  return kOk;
}

int cmd_propagate(const RunConfig& rc) {
  const fs::path out = out_dir(rc);
  rc.write(out);
  const Corpus corpus = rc.open_corpus();
  const auto P = load_model(rc);
  const double iou = propagation_score(P, corpus, rc);
  ExperimentReport rep;
  rep.add("propagate", "first_frame_mask", "mean_iou", iou, rc.u64("seed"));
  rep.write(out / "propagate.csv");
  std::printf("mean IoU %.4f over %zu videos\n", iou, std::min(rc.size("propagate_videos"), corpus.indices(Split::test).size()));
  return kOk;
}

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

int cmd_inspect(const std::string& path) {
  if (!fs::exists(path)) throw IoError(path + " does not exist");
  if (fs::is_directory(path)) return cmd_inspect((fs::path(path) / kManifestName).string());
  const std::string head = io_detail::read_file(path).substr(0, 8);
  if (head.size() == 8 && std::memcmp(head.data(), kVideoMagic, 8) == 0) {
    const VideoHeader h = read_video_header(path);
    std::printf("kind video\nversion %u\nwidth %u\nheight %u\nchannels %u\nframe_count %u\nclass_id %u\nseed %llu\n",
                h.version, h.width, h.height, h.channels, h.frame_count, h.class_id,
                static_cast<unsigned long long>(h.seed));
    return kOk;
  }
  if (head.size() == 8 && std::memcmp(head.data(), kCheckpointMagic, 8) == 0) {
    const TensorArchive a = load_archive(path);
    std::size_t values = 0;
    for (const auto& [_, r] : a) values += r.bytes.size() / r.element_size();
    std::printf("kind checkpoint\nversion %u\ntensors %zu\nvalues %zu\n", kCheckpointVersion, a.size(), values);
    for (const auto& [name, r] : a) {
      std::printf("%s %s %s", name.c_str(), dtype_name(r.dtype), shape_str(r.shape).c_str());
      if (name.rfind("config/", 0) == 0 || name.rfind("state/", 0) == 0) {
        for (double v : r.values<double>()) std::printf(" %.9g", v);
      }
      std::printf("\n");
    }
    return kOk;
  }
  if (fs::path(path).filename() == kManifestName) {
    const Manifest m = read_manifest(path);
    m.validate();
    std::size_t train = 0;
    for (const auto& e : m.entries) train += e.split == Split::train;
    std::printf("kind manifest\nentries %zu\ntrain %zu\ntest %zu\n", m.entries.size(), train, m.entries.size() - train);
    return kOk;
  }
  throw FormatError("unrecognized file " + path, 0);
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frame-level temporal self-supervision on synthetic motion videos"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  const std::map<std::string, std::string> corpus_alias = {{"train_videos", "train"}, {"test_videos", "test"}};
  std::map<std::string, KeyFlags> flags;
  std::map<std::string, CLI::App*> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "render a synthetic corpus and its manifest into --out"},
      {"pretrain", "pretrain a model; writes resolved.cfg, metrics.csv and checkpoints into --out"},
      {"probe", "linear probe on frozen features of --checkpoint"},
      {"retrieve", "nearest-neighbour retrieval (test queries, train search set)"},
      {"shortcut-probe", "train OFL+TSP under the four input/augmentation conditions"},
      {"ablate", "run the rows of an ablation --study"},
      {"perturb", "retrieval under frame-independent perturbations"},
      {"propagate", "first-frame mask propagation on test videos"},
  };
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    if (name == "gen") {
      auto alias = corpus_alias;
      alias["corpus_seed"] = "seed";
      register_keys(subs[name], flags[name], alias, {"seed"});
    } else {
      register_keys(subs[name], flags[name], corpus_alias);
    }
  }
  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "print the header fields of a video, checkpoint or manifest");
  inspect->add_option("path", inspect_path, "file to inspect")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
    return kConfigFailure;
  }

  try {
    if (inspect->parsed()) return cmd_inspect(inspect_path);
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      const RunConfig rc = resolve(flags[name]);
      if (name == "gen") return cmd_gen(rc);
      if (name == "pretrain") return cmd_pretrain(rc);
      if (name == "probe") return cmd_probe(rc);
      if (name == "retrieve") return cmd_retrieve(rc);
      if (name == "shortcut-probe") return cmd_shortcut(rc);
      if (name == "ablate") return cmd_ablate(rc);
      if (name == "perturb") return cmd_perturb(rc);
      if (name == "propagate") return cmd_propagate(rc);
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: numerical: %s\n", one_line(e.what()).c_str());
    return kNumericalFailure;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
    return kConfigFailure;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: io: %s\n", one_line(e.what()).c_str());
    return kIoFailure;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: io: %s\n", one_line(e.what()).c_str());
    return kIoFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: io: %s\n", one_line(e.what()).c_str());
    return kIoFailure;
  }
  return kConfigFailure;
}
