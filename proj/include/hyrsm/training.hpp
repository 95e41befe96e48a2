#pragma once

// Episodic training with Adam and evaluation over sampled episodes.

#include "hyrsm/episodes.hpp"
#include "hyrsm/losses.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>

namespace hyrsm {

enum class Regime { Supervised, Semi, Unsupervised };

inline std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::Supervised: return "supervised";
    case Regime::Semi: return "semi";
    case Regime::Unsupervised: return "unsupervised";
  }
  return "supervised";
}

inline Regime parse_regime(std::string_view s) {
  if (s == "supervised") return Regime::Supervised;
  if (s == "semi") return Regime::Semi;
  if (s == "unsupervised") return Regime::Unsupervised;
  throw Error(ErrorCode::InvalidArgument, "unknown regime '" + std::string(s) + "'");
}

struct TrainConfig {
  Regime regime = Regime::Supervised;
  MetricKind metric = MetricKind::BiMHM;
  std::optional<CoherenceKind> coherence = CoherenceKind::SmoothTCR;
  LossWeights loss;

  int n_way = 5;
  int k_shot = 1;
  int queries_per_class = 3;
  int episodes_per_epoch = 100;
  int epochs = 30;

  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real adam_eps = 1e-8;

  std::uint64_t seed = 0;
  int eval_episodes = 1000;
  unsigned threads = 0;  // 0 = hardware concurrency

  // Relation module shape; channels, max_frames and global_classes come from data.
  int heads = 2;
  int corr_dim = 64;
  KappaMode kappa = KappaMode::Sigmoid;
  PoolMode pool = PoolMode::SupportAndQuery;
  bool positional = true;
  bool use_intra = true;
  bool use_inter = true;

  // Semi-supervised episodes.
  int unlabeled_size = 100;
  Real distractor_fraction = 0.4;
  Real tau = 0.7;
  int pseudo_rounds = 1;

  // Unsupervised regime; 0 picks min(150, n_videos / 4).
  int n_clusters = 0;
  int kmeans_iters = 100;

  EpisodeShape shape() const { return {n_way, k_shot, queries_per_class}; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw Error(ErrorCode::InvalidArgument, std::string(name) + " must be positive");
    };
    positive(n_way, "n_way");
    positive(k_shot, "k_shot");
    positive(queries_per_class, "queries_per_class");
    positive(episodes_per_epoch, "episodes_per_epoch");
    positive(eval_episodes, "eval_episodes");
    positive(heads, "heads");
    positive(corr_dim, "corr_dim");
    positive(pseudo_rounds, "pseudo_rounds");
    positive(kmeans_iters, "kmeans_iters");
    if (epochs < 0) throw Error(ErrorCode::InvalidArgument, "epochs must be nonnegative");
    if (!(learning_rate >= 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw Error(ErrorCode::InvalidArgument, "Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "Adam epsilon must be positive");
    if (unlabeled_size < 0) throw Error(ErrorCode::InvalidArgument, "unlabeled_size must be nonnegative");
    if (!(tau >= 0.0)) throw Error(ErrorCode::InvalidArgument, "tau must be nonnegative");
    if (n_clusters < 0) throw Error(ErrorCode::InvalidArgument, "n_clusters must be nonnegative");
    loss.validate();
  }

  RelationConfig relation(int channels, int frames, int global_classes) const {
    RelationConfig r;
    r.channels = channels;
    r.heads = heads;
    r.max_frames = frames;
    r.corr_dim = corr_dim;
    r.global_classes = std::max(1, global_classes);
    r.kappa = kappa;
    r.pool = pool;
    r.positional = positional;
    r.use_intra = use_intra;
    r.use_inter = use_inter;
    r.validate();
    return r;
  }
};

// JSON keys mirror the field names. Missing keys keep their defaults; unknown
// keys are rejected so typos in config files surface.
inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["regime"] = regime_name(c.regime);
  j["metric"] = metric_name(c.metric);
  j["coherence"] = coherence_name(c.coherence);
  j["lambda_aux"] = c.loss.lambda_aux;
  j["lambda_tcr"] = c.loss.lambda_tcr;
  j["margin"] = c.loss.margin;
  j["window"] = c.loss.window;
  j["sigma"] = c.loss.sigma;
  j["n_way"] = c.n_way;
  j["k_shot"] = c.k_shot;
  j["queries_per_class"] = c.queries_per_class;
  j["episodes_per_epoch"] = c.episodes_per_epoch;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["eval_episodes"] = c.eval_episodes;
  j["threads"] = c.threads;
  j["heads"] = c.heads;
  j["corr_dim"] = c.corr_dim;
  j["kappa"] = c.kappa == KappaMode::RowSoftmax ? "softmax" : "sigmoid";
  j["pool"] = c.pool == PoolMode::SupportOnly ? "support" : "support+query";
  j["positional"] = c.positional;
  j["use_intra"] = c.use_intra;
  j["use_inter"] = c.use_inter;
  j["unlabeled_size"] = c.unlabeled_size;
  j["distractor_fraction"] = c.distractor_fraction;
  j["tau"] = c.tau;
  j["pseudo_rounds"] = c.pseudo_rounds;
  j["n_clusters"] = c.n_clusters;
  j["kmeans_iters"] = c.kmeans_iters;
  return j;
}

inline void apply_config_json(TrainConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "regime") c.regime = parse_regime(v.get<std::string>());
      else if (key == "metric") c.metric = parse_metric(v.get<std::string>());
      else if (key == "coherence") c.coherence = parse_coherence(v.get<std::string>());
      else if (key == "lambda_aux") c.loss.lambda_aux = v.get<Real>();
      else if (key == "lambda_tcr") c.loss.lambda_tcr = v.get<Real>();
      else if (key == "margin") c.loss.margin = v.get<Real>();
      else if (key == "window") c.loss.window = v.get<int>();
      else if (key == "sigma") c.loss.sigma = v.get<Real>();
      else if (key == "n_way") c.n_way = v.get<int>();
      else if (key == "k_shot") c.k_shot = v.get<int>();
      else if (key == "queries_per_class") c.queries_per_class = v.get<int>();
      else if (key == "episodes_per_epoch") c.episodes_per_epoch = v.get<int>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<Real>();
      else if (key == "beta1") c.beta1 = v.get<Real>();
      else if (key == "beta2") c.beta2 = v.get<Real>();
      else if (key == "adam_eps") c.adam_eps = v.get<Real>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "eval_episodes") c.eval_episodes = v.get<int>();
      else if (key == "threads") c.threads = v.get<unsigned>();
      else if (key == "heads") c.heads = v.get<int>();
      else if (key == "corr_dim") c.corr_dim = v.get<int>();
      else if (key == "kappa") {
        const auto s = v.get<std::string>();
        if (s != "sigmoid" && s != "softmax") throw Error(ErrorCode::InvalidArgument, "kappa must be sigmoid or softmax");
        c.kappa = s == "softmax" ? KappaMode::RowSoftmax : KappaMode::Sigmoid;
      } else if (key == "pool") {
        const auto s = v.get<std::string>();
        if (s != "support" && s != "support+query")
          throw Error(ErrorCode::InvalidArgument, "pool must be support or support+query");
        c.pool = s == "support" ? PoolMode::SupportOnly : PoolMode::SupportAndQuery;
      } else if (key == "positional") c.positional = v.get<bool>();
      else if (key == "use_intra") c.use_intra = v.get<bool>();
      else if (key == "use_inter") c.use_inter = v.get<bool>();
      else if (key == "unlabeled_size") c.unlabeled_size = v.get<int>();
      else if (key == "distractor_fraction") c.distractor_fraction = v.get<Real>();
      else if (key == "tau") c.tau = v.get<Real>();
      else if (key == "pseudo_rounds") c.pseudo_rounds = v.get<int>();
      else if (key == "n_clusters") c.n_clusters = v.get<int>();
      else if (key == "kmeans_iters") c.kmeans_iters = v.get<int>();
      else throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::InvalidArgument, "config key '" + key + "': " + ex.what());
    }
  }
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  apply_config_json(c, j);
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(std::vector<ag::Tensor> params, Real lr, Real beta1, Real beta2, Real eps)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  // Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    const Real c1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
    const Real c2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Matrix g = p.grad();
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      if (lr_ != 0.0) {
        const Matrix update =
            ((m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + eps_)).matrix() * lr_;
        p.mutable_value() -= update;
      }
      p.zero_grad();
    }
  }

  long steps() const noexcept { return t_; }

 private:
  std::vector<ag::Tensor> params_;
  std::vector<Matrix> m_, v_;
  Real lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LogEntry {
  long step = 0;
  int epoch = 0;
  Real ce = 0.0;
  Real aux = 0.0;  // already multiplied by lambda_aux
  Real tcr = 0.0;  // already multiplied by lambda_tcr
  Real total = 0.0;
  Real accuracy = 0.0;
};

inline std::string log_line(const LogEntry& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["epoch"] = e.epoch;
  j["ce"] = e.ce;
  j["aux"] = e.aux;
  j["tcr"] = e.tcr;
  j["total"] = e.total;
  j["accuracy"] = e.accuracy;
  return j.dump();
}

struct TrainResult {
  RelationModelParams params;
  std::vector<LogEntry> log;
  std::vector<ClusterAssignment> clusters;  // unsupervised regime only
};

namespace detail {

// Independent seed streams derived from the run seed.
inline constexpr std::uint64_t kInitStream = 0x1000000000ULL;
inline constexpr std::uint64_t kClusterStream = 0x2000000000ULL;
inline constexpr std::uint64_t kEvalStream = 0x3000000000ULL;

inline Real episode_accuracy(const Matrix& logits, const Episode& e) {
  if (e.query.empty()) return 0.0;
  int correct = 0;
  for (std::size_t q = 0; q < e.query.size(); ++q)
    if (argmax_row(logits, static_cast<Eigen::Index>(q)) == e.query[q].label) ++correct;
  return static_cast<Real>(correct) / static_cast<Real>(e.query.size());
}

inline void require_data(const Dataset& ds) {
  if (ds.videos.empty()) throw Error(ErrorCode::InsufficientData, "dataset has no videos");
}

}  // namespace detail

/// Fresh parameters for data of the given frame shape, seeded from cfg.seed.
inline RelationModelParams initial_params(const TrainConfig& cfg, int channels, int frames, int global_classes) {
  Rng rng(derive_seed(cfg.seed, detail::kInitStream));
  return RelationModelParams::initialize(cfg.relation(channels, frames, global_classes), rng);
}

/// Called after every optimizer step; lets callers stream the log.
using StepCallback = std::function<void(const LogEntry&)>;

inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const StepCallback& on_step = {}) {
  cfg.validate();
  detail::require_data(ds);
  const int frames = static_cast<int>(ds.videos.front().frames.rows());
  const int channels = static_cast<int>(ds.videos.front().frames.cols());

  TrainResult result;
  int global_classes = static_cast<int>(ds.label_space.size());
  if (cfg.regime == Regime::Unsupervised) {
    const int k = cfg.n_clusters > 0 ? cfg.n_clusters : default_cluster_count(ds.size());
    Rng crng(derive_seed(cfg.seed, detail::kClusterStream));
    result.clusters = kmeans_cluster(ds.videos, k, crng, cfg.kmeans_iters);
    global_classes = k;
  }
  result.params = initial_params(cfg, channels, frames, global_classes);
  RelationModelParams& params = result.params;

  std::vector<ag::Tensor> weights;
  for (const auto& [name, t] : params.named()) weights.push_back(t);
  Adam opt(weights, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);

  const EpisodeShape shape = cfg.shape();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = 0; i < cfg.episodes_per_epoch; ++i, ++step) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
      Episode e;
      switch (cfg.regime) {
        case Regime::Supervised: e = sample_supervised(ds, shape, rng); break;
        case Regime::Semi:
          e = sample_semi_supervised(ds, shape, {cfg.unlabeled_size, cfg.distractor_fraction}, rng);
          if (!e.unlabeled.empty()) e = pseudo_label_and_augment(e, params, cfg.metric, cfg.tau, cfg.pseudo_rounds);
          break;
        case Regime::Unsupervised: e = sample_unsupervised(result.clusters, ds, shape, rng); break;
      }

      ag::Tape tape;
      const EpisodeEmbeddings emb = forward_episode(tape, e, params);
      const ag::Tensor logits = episode_logits_on_tape(tape, emb, e, cfg.metric);
      const LossTerms terms = total_loss(tape, e, emb, logits, cfg.loss, cfg.coherence, params);
      const Real total = terms.total.item();
      if (!std::isfinite(total))
        throw Error(ErrorCode::NonFiniteLoss, "loss " + std::to_string(total) + " at step " + std::to_string(step) +
                                                  " (ce " + std::to_string(terms.ce) + ", aux " +
                                                  std::to_string(terms.aux) + ", tcr " + std::to_string(terms.tcr) +
                                                  ")");
      ag::backward(tape, terms.total);
      opt.step();

      LogEntry entry{step, epoch, terms.ce, cfg.loss.lambda_aux * terms.aux, cfg.loss.lambda_tcr * terms.tcr, total,
                     detail::episode_accuracy(logits.value(), e)};
      if (on_step) on_step(entry);
      result.log.push_back(entry);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  Real mean_accuracy = 0.0;
  Real ci95 = 0.0;  // half-width, 1.96 * sample std / sqrt(episodes)
  std::vector<Real> per_episode;
  nlohmann::ordered_json config;
  double wall_seconds = 0.0;
  // Semi-supervised runs: fraction of promoted videos whose true class is the
  // predicted episode class; NaN when nothing was promoted.
  Real pseudo_precision = std::numeric_limits<Real>::quiet_NaN();
  std::size_t pseudo_count = 0;
};

inline Real confidence_half_width(const std::vector<Real>& xs) {
  if (xs.size() < 2) return 0.0;
  const Real n = static_cast<Real>(xs.size());
  Real mean = 0.0;
  for (Real x : xs) mean += x;
  mean /= n;
  Real ss = 0.0;
  for (Real x : xs) ss += (x - mean) * (x - mean);
  return 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

/// Episode `i` of an evaluation run; pure in (cfg.seed, i).
inline Episode evaluation_episode(const TrainConfig& cfg, const Dataset& ds, std::size_t i) {
  Rng rng(derive_seed(derive_seed(cfg.seed, detail::kEvalStream), i));
  if (cfg.regime == Regime::Semi && cfg.unlabeled_size > 0)
    return sample_semi_supervised(ds, cfg.shape(), {cfg.unlabeled_size, cfg.distractor_fraction}, rng);
  return sample_supervised(ds, cfg.shape(), rng);
}

/// Accuracy of `params` over cfg.eval_episodes episodes of `ds`. Semi-supervised
/// configs augment each episode's support with pseudo-labels first.
inline EvalReport evaluate(const RelationModelParams& params, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  detail::require_data(ds);
  const auto start = std::chrono::steady_clock::now();
  const auto n = static_cast<std::size_t>(cfg.eval_episodes);
  std::vector<Real> acc(n, 0.0);
  std::vector<std::size_t> promoted(n, 0), promoted_right(n, 0);

  parallel_for(n, resolve_threads(cfg.threads), [&](std::size_t i) {
    Episode e = evaluation_episode(cfg, ds, i);
    if (!e.unlabeled.empty()) {
      e = pseudo_label_and_augment(e, params, cfg.metric, cfg.tau, cfg.pseudo_rounds);
      for (const auto& pl : e.pseudo_labels) {
        ++promoted[i];
        for (const auto& u : e.unlabeled)
          if (u.sequence.video_id == pl.video_id &&
              u.global_label == e.support[static_cast<std::size_t>(pl.predicted) * e.k_shot].global_label)
            ++promoted_right[i];
      }
    }
    ag::Tape tape = ag::Tape::no_grad();
    const EpisodeEmbeddings emb = forward_episode(tape, e, params);
    acc[i] = detail::episode_accuracy(episode_logits(emb, e, cfg.metric), e);
  });

  EvalReport r;
  r.per_episode = std::move(acc);
  Real sum = 0.0;
  for (Real a : r.per_episode) sum += a;
  r.mean_accuracy = sum / static_cast<Real>(n);
  r.ci95 = confidence_half_width(r.per_episode);
  r.config = config_to_json(cfg);
  std::size_t total = 0, right = 0;
  for (std::size_t i = 0; i < n; ++i) total += promoted[i], right += promoted_right[i];
  r.pseudo_count = total;
  if (total > 0) r.pseudo_precision = static_cast<Real>(right) / static_cast<Real>(total);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Line-oriented report. Wall-clock time is left out so reruns diff clean.
inline std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  char buf[64];
  auto num = [&buf](Real v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  out << "config\t" << r.config.dump() << '\n';
  out << "episodes\t" << r.per_episode.size() << '\n';
  out << "mean_accuracy\t" << num(r.mean_accuracy) << '\n';
  out << "ci95\t" << num(r.ci95) << '\n';
  if (r.pseudo_count > 0 || !std::isnan(r.pseudo_precision)) {
    out << "pseudo_labels\t" << r.pseudo_count << '\n';
    out << "pseudo_precision\t" << num(r.pseudo_precision) << '\n';
  }
  for (std::size_t i = 0; i < r.per_episode.size(); ++i) out << "episode\t" << i << '\t' << num(r.per_episode[i]) << '\n';
  return out.str();
}

}  // namespace hyrsm
