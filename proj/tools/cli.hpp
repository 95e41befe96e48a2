#pragma once

#include <hyrsm/hyrsm.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace hyrsm::cli {

// Flags that override the training/evaluation config. Unset flags leave the
// config-file (or built-in) value alone.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> metric, coherence, regime;
  std::optional<int> n_way, k_shot, queries, epochs, episodes_per_epoch, eval_episodes;
  std::optional<int> unlabeled, n_clusters;
  std::optional<double> lr, tau;
  std::optional<unsigned> threads;
};

inline std::vector<std::string> metric_names() {
  std::vector<std::string> out;
  for (auto k : kAllMetrics) out.emplace_back(metric_name(k));
  return out;
}

inline void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config_path, "JSON config file (flags override it)")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "run seed");
  app->add_option("--metric", f.metric, "sequence metric")->check(CLI::IsMember(metric_names()));
  app->add_option("--coherence", f.coherence, "temporal coherence regularizer")
      ->check(CLI::IsMember({"none", "idm", "hard", "smooth"}));
  app->add_option("--regime", f.regime, "training regime")->check(CLI::IsMember({"supervised", "semi", "unsupervised"}));
  app->add_option("--n-way", f.n_way, "classes per episode")->check(CLI::PositiveNumber);
  app->add_option("--k-shot", f.k_shot, "support videos per class")->check(CLI::PositiveNumber);
  app->add_option("--queries", f.queries, "query videos per class")->check(CLI::PositiveNumber);
  app->add_option("--epochs", f.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--episodes-per-epoch", f.episodes_per_epoch, "episodes per epoch")->check(CLI::PositiveNumber);
  app->add_option("--eval-episodes", f.eval_episodes, "evaluation episodes")->check(CLI::PositiveNumber);
  app->add_option("--unlabeled", f.unlabeled, "unlabeled pool size (semi regime)")->check(CLI::NonNegativeNumber);
  app->add_option("--n-clusters", f.n_clusters, "k-means clusters, 0 = auto")->check(CLI::NonNegativeNumber);
  app->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
  app->add_option("--tau", f.tau, "pseudo-label confidence threshold");
  app->add_option("--threads", f.threads, "worker threads, 0 = all cores");
}

// defaults < config file < flags
inline TrainConfig resolve_config(const ConfigFlags& f) {
  TrainConfig c;
  if (!f.config_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(f.config_path));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::InvalidArgument, "config '" + f.config_path + "': " + ex.what());
    }
    apply_config_json(c, j);
  }
  if (f.seed) c.seed = *f.seed;
  if (f.metric) c.metric = parse_metric(*f.metric);
  if (f.coherence) c.coherence = parse_coherence(*f.coherence);
  if (f.regime) c.regime = parse_regime(*f.regime);
  if (f.n_way) c.n_way = *f.n_way;
  if (f.k_shot) c.k_shot = *f.k_shot;
  if (f.queries) c.queries_per_class = *f.queries;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.episodes_per_epoch) c.episodes_per_epoch = *f.episodes_per_epoch;
  if (f.eval_episodes) c.eval_episodes = *f.eval_episodes;
  if (f.unlabeled) c.unlabeled_size = *f.unlabeled;
  if (f.n_clusters) c.n_clusters = *f.n_clusters;
  if (f.lr) c.learning_rate = *f.lr;
  if (f.tau) c.tau = *f.tau;
  if (f.threads) c.threads = *f.threads;
  c.validate();
  return c;
}

inline void add_synth_flags(CLI::App* app, SynthSpec& s) {
  app->add_option("--classes", s.n_classes, "total classes")->capture_default_str();
  app->add_option("--test-classes", s.test_classes, "classes held out as meta-test")->capture_default_str();
  app->add_option("--videos-per-class", s.videos_per_class, "videos per class")->capture_default_str();
  app->add_option("--subactions", s.subactions, "sub-actions per class")->capture_default_str();
  app->add_option("--frames", s.frames, "frames per video")->capture_default_str();
  app->add_option("--channels", s.channels, "feature channels")->capture_default_str();
  app->add_option("--noise", s.noise_sigma, "per-entry Gaussian noise")->capture_default_str();
  app->add_option("--label-noise", s.label_noise_rate, "label flip probability")->capture_default_str();
  app->add_option("--nuisance-dims", s.nuisance_dims, "channels carrying a per-video offset")->capture_default_str();
  app->add_option("--nuisance-sigma", s.nuisance_sigma, "scale of the per-video offset")->capture_default_str();
}

inline nlohmann::ordered_json synth_to_json(const SynthSpec& s) {
  nlohmann::ordered_json j;
  j["classes"] = s.n_classes;
  j["test_classes"] = s.test_classes;
  j["videos_per_class"] = s.videos_per_class;
  j["subactions"] = s.subactions;
  j["frames"] = s.frames;
  j["channels"] = s.channels;
  j["p_mis"] = s.misalignment_rate;
  j["noise"] = s.noise_sigma;
  j["label_noise"] = s.label_noise_rate;
  j["nuisance_dims"] = s.nuisance_dims;
  j["nuisance_sigma"] = s.nuisance_sigma;
  j["seed"] = s.seed;
  return j;
}

inline std::string fixed6(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return std::string(buf) == "-0.000000" ? "0.000000" : buf;
}

inline void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty())
    out << text;
  else
    detail::write_file(out_path, text);
}

inline Dataset load_split(const std::string& index_path, const std::string& split) {
  return load_dataset(read_index(index_path).filter(parse_split(split)));
}

// --- subcommands -----------------------------------------------------------------

inline int cmd_synth(SynthSpec spec, const std::string& out_dir, std::ostream& err) {
  err << "config\t" << synth_to_json(spec).dump() << '\n';
  const auto idx = generate_synthetic(spec, out_dir);
  err << "wrote " << idx.entries.size() << " videos to " << out_dir << '\n';
  return 0;
}

inline int cmd_train(const TrainConfig& cfg, const std::string& index, const std::string& ckpt,
                     const std::string& log_path, std::ostream& out, std::ostream& err) {
  err << "config\t" << config_to_json(cfg).dump() << '\n';
  const Dataset ds = load_split(index, "meta-train");
  std::string log;
  const auto result = train(cfg, ds, [&](const LogEntry& e) {
    if (log_path.empty())
      out << log_line(e) << '\n';
    else
      log += log_line(e) + '\n';
  });
  save_checkpoint(ckpt, result.params);
  if (!log_path.empty()) detail::write_file(log_path, log);
  err << "trained " << result.log.size() << " episodes, checkpoint " << ckpt << '\n';
  return 0;
}

inline int cmd_eval(const TrainConfig& cfg, const std::string& index, const std::string& split,
                    const std::string& ckpt, const std::string& out_path, std::ostream& out, std::ostream& err) {
  err << "config\t" << config_to_json(cfg).dump() << '\n';
  const RelationModelParams params = load_checkpoint(ckpt);
  const EvalReport r = evaluate(params, load_split(index, split), cfg);
  emit(format_report(r), out_path, out);
  err << "wall_seconds\t" << fixed6(r.wall_seconds) << '\n';
  return 0;
}

inline int cmd_match(const std::string& a, const std::string& b, const std::string& metric, std::ostream& out,
                     std::ostream& err) {
  const MetricKind kind = parse_metric(metric);
  nlohmann::ordered_json echo;
  echo["a"] = a;
  echo["b"] = b;
  echo["metric"] = metric;
  err << "config\t" << echo.dump() << '\n';
  const Matrix x = read_sequence(a).frames, y = read_sequence(b).frames;
  const Real dist = sequence_distance(x, y, kind);
  const DistanceMatrix d = frame_distances(x, y);
  std::vector<FrameMatch> matches;
  if (kind == MetricKind::Diagonal) {
    for (Eigen::Index t = 0; t < std::min(d.rows(), d.cols()); ++t) matches.push_back({t, t, d(t, t)});
  } else {
    matches = nearest_frames(d);
  }
  out << "# metric\t" << metric << '\n';
  out << "# distance\t" << fixed6(dist) << '\n';
  out << "frame\tmatch\tdistance\n";
  for (const auto& m : matches) out << m.frame << '\t' << m.match << '\t' << fixed6(m.distance) << '\n';
  return 0;
}

inline int cmd_cluster(const TrainConfig& cfg, const std::string& index, const std::string& split,
                       const std::string& ckpt, const std::string& out_path, std::ostream& out, std::ostream& err) {
  err << "config\t" << config_to_json(cfg).dump() << '\n';
  const Dataset ds = load_split(index, split);
  std::optional<RelationModelParams> params;
  if (!ckpt.empty()) params = load_checkpoint(ckpt);
  const int k = cfg.n_clusters > 0 ? cfg.n_clusters : default_cluster_count(ds.size());
  Rng rng(derive_seed(cfg.seed, detail::kClusterStream));
  const auto assign = kmeans_cluster(ds.videos, k, rng, cfg.kmeans_iters, params ? &*params : nullptr);
  std::string text = "# n_clusters\t" + std::to_string(k) + "\nvideo_id\tcluster\n";
  for (const auto& a : assign) text += a.video_id + '\t' + std::to_string(a.cluster) + '\n';
  emit(text, out_path, out);
  return 0;
}

// Rows: one per metric (one trained model per p_mis column, evaluated under each
// metric), then one per coherence kind (trained with it, evaluated under cfg.metric).
inline int cmd_ablate(const TrainConfig& cfg, SynthSpec spec, const std::vector<double>& p_mis,
                      const std::string& out_path, std::ostream& out, std::ostream& err) {
  nlohmann::ordered_json echo;
  echo["train"] = config_to_json(cfg);
  echo["synthetic"] = synth_to_json(spec);
  echo["p_mis"] = p_mis;
  err << "config\t" << echo.dump() << '\n';

  const std::vector<std::optional<CoherenceKind>> coherences = {
      std::nullopt, CoherenceKind::IDM, CoherenceKind::HardMargin, CoherenceKind::SmoothTCR};
  std::vector<std::vector<Real>> metric_acc(std::size(kAllMetrics)), coh_acc(coherences.size());
  for (double p : p_mis) {
    spec.misalignment_rate = p;
    const auto corpus = synthesize(spec);
    const Dataset train_ds = corpus.dataset(Split::MetaTrain), test_ds = corpus.dataset(Split::MetaTest);
    for (std::size_t ci = 0; ci < coherences.size(); ++ci) {
      TrainConfig c = cfg;
      c.coherence = coherences[ci];
      const auto params = train(c, train_ds).params;
      coh_acc[ci].push_back(evaluate(params, test_ds, c).mean_accuracy);
      if (coherences[ci] != cfg.coherence) continue;
      for (std::size_t mi = 0; mi < std::size(kAllMetrics); ++mi) {
        c.metric = kAllMetrics[mi];
        metric_acc[mi].push_back(evaluate(params, test_ds, c).mean_accuracy);
      }
    }
    err << "p_mis " << fixed6(p) << " done\n";
  }

  std::string text = "row";
  for (double p : p_mis) text += "\tp_mis=" + fixed6(p);
  text += '\n';
  for (std::size_t mi = 0; mi < std::size(kAllMetrics); ++mi) {
    text += "metric:" + std::string(metric_name(kAllMetrics[mi]));
    for (Real a : metric_acc[mi]) text += '\t' + fixed6(a);
    text += '\n';
  }
  for (std::size_t ci = 0; ci < coherences.size(); ++ci) {
    text += "coherence:" + std::string(coherence_name(coherences[ci]));
    for (Real a : coh_acc[ci]) text += '\t' + fixed6(a);
    text += '\n';
  }
  emit(text, out_path, out);
  return 0;
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot action recognition over frame-feature sequences"};
  app.name("hyrsm");
  app.require_subcommand(1, 1);

  SynthSpec synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth-gen", "write a synthetic feature dataset");
  add_synth_flags(synth_cmd, synth);
  synth_cmd->add_option("--p-mis", synth.misalignment_rate, "misalignment probability")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  ConfigFlags train_flags;
  std::string train_index, train_out, train_log;
  auto* train_cmd = app.add_subcommand("train", "episodic training on the meta-train split");
  add_config_flags(train_cmd, train_flags);
  train_cmd->add_option("--index", train_index, "dataset index.jsonl")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "checkpoint path")->required();
  train_cmd->add_option("--log", train_log, "training log path (default: stdout)");

  ConfigFlags eval_flags;
  std::string eval_index, eval_ckpt, eval_out, eval_split = "meta-test";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint over sampled episodes");
  add_config_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--index", eval_index, "dataset index.jsonl")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval_cmd->add_option("--split", eval_split, "split to evaluate")
      ->check(CLI::IsMember({"meta-train", "meta-test"}))
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "report path (default: stdout)");

  std::string match_a, match_b, match_metric = "bimhm";
  auto* match_cmd = app.add_subcommand("match", "frame correspondences between two feature files");
  match_cmd->add_option("a", match_a, "first feature file")->required();
  match_cmd->add_option("b", match_b, "second feature file")->required();
  match_cmd->add_option("--metric", match_metric, "sequence metric")
      ->check(CLI::IsMember(metric_names()))
      ->capture_default_str();

  ConfigFlags cluster_flags;
  std::string cluster_index, cluster_ckpt, cluster_out, cluster_split = "meta-train";
  auto* cluster_cmd = app.add_subcommand("cluster", "k-means over pooled video features");
  add_config_flags(cluster_cmd, cluster_flags);
  cluster_cmd->add_option("--index", cluster_index, "dataset index.jsonl")->required()->check(CLI::ExistingFile);
  cluster_cmd->add_option("--checkpoint", cluster_ckpt, "embed with this checkpoint before clustering");
  cluster_cmd->add_option("--split", cluster_split, "split to cluster")
      ->check(CLI::IsMember({"meta-train", "meta-test"}))
      ->capture_default_str();
  cluster_cmd->add_option("--out", cluster_out, "assignments path (default: stdout)");

  ConfigFlags ablate_flags;
  SynthSpec ablate_synth;
  std::vector<double> ablate_p_mis = {0.0, 0.5, 1.0};
  std::optional<std::uint64_t> ablate_data_seed;
  std::string ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "metric x misalignment and coherence accuracy table");
  add_config_flags(ablate_cmd, ablate_flags);
  add_synth_flags(ablate_cmd, ablate_synth);
  ablate_cmd->add_option("--p-mis", ablate_p_mis, "misalignment rates (columns)")->capture_default_str();
  ablate_cmd->add_option("--data-seed", ablate_data_seed, "synthetic data seed (default: --seed)");
  ablate_cmd->add_option("--out", ablate_out, "table path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << "usage error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth, synth_out, err);
    if (*train_cmd) return cmd_train(resolve_config(train_flags), train_index, train_out, train_log, out, err);
    if (*eval_cmd)
      return cmd_eval(resolve_config(eval_flags), eval_index, eval_split, eval_ckpt, eval_out, out, err);
    if (*match_cmd) return cmd_match(match_a, match_b, match_metric, out, err);
    if (*cluster_cmd)
      return cmd_cluster(resolve_config(cluster_flags), cluster_index, cluster_split, cluster_ckpt, cluster_out, out,
                         err);
    if (*ablate_cmd) {
      const TrainConfig cfg = resolve_config(ablate_flags);
      ablate_synth.seed = ablate_data_seed.value_or(cfg.seed);
      return cmd_ablate(cfg, ablate_synth, ablate_p_mis, ablate_out, out, err);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace hyrsm::cli
