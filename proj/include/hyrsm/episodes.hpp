#pragma once

// Episode construction for the supervised, semi-supervised and unsupervised
// regimes, plus k-means for building pseudo-classes.

#include "hyrsm/data.hpp"
#include "hyrsm/metric.hpp"
#include "hyrsm/relation.hpp"

namespace hyrsm {

namespace detail {

// Member indices per class, classes in ascending order.
inline std::map<int, std::vector<std::size_t>> members_by_class(const std::vector<int>& labels) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kUnknownLabel) out[labels[i]].push_back(i);
  return out;
}

inline EpisodeItem make_item(const FeatureSequence& f, int label, int global_label) {
  return EpisodeItem{f, label, global_label};
}

}  // namespace detail

struct EpisodeShape {
  int n_way = 5;
  int k_shot = 1;
  int queries_per_class = 1;
};

/// Samples an episode from `videos` using `labels` as class ids (kUnknownLabel
/// entries never participate). Classes are drawn uniformly without replacement
/// among those with at least k + q members; episode-local labels follow draw order.
inline Episode sample_from_labels(const std::vector<FeatureSequence>& videos, const std::vector<int>& labels,
                                  const EpisodeShape& shape, Rng& rng,
                                  std::vector<int>* chosen_classes = nullptr,
                                  std::vector<std::size_t>* used_videos = nullptr) {
  if (videos.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "videos and labels differ in length");
  if (shape.n_way < 1 || shape.k_shot < 1 || shape.queries_per_class < 0)
    throw Error(ErrorCode::InvalidArgument, "episode sizes must be positive");
  const auto members = detail::members_by_class(labels);
  const std::size_t need = static_cast<std::size_t>(shape.k_shot + shape.queries_per_class);
  std::vector<int> eligible;
  for (const auto& [cls, idx] : members)
    if (idx.size() >= need) eligible.push_back(cls);
  if (eligible.size() < static_cast<std::size_t>(shape.n_way))
    throw Error(ErrorCode::InsufficientData, std::to_string(eligible.size()) + " classes have >= " +
                                                 std::to_string(need) + " videos, need " +
                                                 std::to_string(shape.n_way));

  Episode e;
  e.n_way = shape.n_way;
  e.k_shot = shape.k_shot;
  const auto picks = rng.choose(eligible.size(), static_cast<std::size_t>(shape.n_way));
  std::vector<std::vector<std::size_t>> drawn;
  for (std::size_t local = 0; local < picks.size(); ++local) {
    const int cls = eligible[picks[local]];
    const auto& pool = members.at(cls);
    std::vector<std::size_t> chosen;
    for (std::size_t j : rng.choose(pool.size(), need)) chosen.push_back(pool[j]);
    drawn.push_back(std::move(chosen));
    if (chosen_classes) chosen_classes->push_back(cls);
  }
  for (std::size_t local = 0; local < drawn.size(); ++local) {
    const int cls = eligible[picks[local]];
    for (std::size_t j = 0; j < static_cast<std::size_t>(shape.k_shot); ++j)
      e.support.push_back(detail::make_item(videos[drawn[local][j]], static_cast<int>(local), cls));
  }
  for (std::size_t local = 0; local < drawn.size(); ++local) {
    const int cls = eligible[picks[local]];
    for (std::size_t j = static_cast<std::size_t>(shape.k_shot); j < need; ++j)
      e.query.push_back(detail::make_item(videos[drawn[local][j]], static_cast<int>(local), cls));
  }
  if (used_videos)
    for (const auto& d : drawn) used_videos->insert(used_videos->end(), d.begin(), d.end());
  return e;
}

inline Episode sample_supervised(const Dataset& ds, const EpisodeShape& shape, Rng& rng) {
  return sample_from_labels(ds.videos, ds.labels, shape, rng);
}

struct UnlabeledPoolSpec {
  int size = 100;
  // Fraction of the pool drawn from distractor classes outside the episode.
  Real distractor_fraction = 0.4;
};

/// Supervised episode plus an unlabeled pool. Pool videos are unused members of
/// the episode classes mixed with videos from n_way other classes (fewer when
/// the split has fewer). Their true class stays in `global_label` for diagnostics.
inline Episode sample_semi_supervised(const Dataset& ds, const EpisodeShape& shape, const UnlabeledPoolSpec& pool,
                                      Rng& rng) {
  std::vector<int> classes;
  std::vector<std::size_t> used;
  Episode e = sample_from_labels(ds.videos, ds.labels, shape, rng, &classes, &used);
  if (pool.size <= 0) return e;
  if (!(pool.distractor_fraction >= 0.0 && pool.distractor_fraction <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "distractor fraction must lie in [0, 1]");

  std::vector<bool> taken(ds.size(), false);
  for (auto i : used) taken[i] = true;
  std::vector<int> others;
  for (const auto& [cls, idx] : detail::members_by_class(ds.labels))
    if (std::find(classes.begin(), classes.end(), cls) == classes.end()) others.push_back(cls);
  std::vector<int> distract_classes;
  for (auto j : rng.choose(others.size(), std::min(others.size(), static_cast<std::size_t>(shape.n_way))))
    distract_classes.push_back(others[j]);

  std::vector<std::size_t> in_episode, outside;
  auto contains = [](const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); };
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (taken[i] || ds.labels[i] == kUnknownLabel) continue;
    if (contains(classes, ds.labels[i]))
      in_episode.push_back(i);
    else if (contains(distract_classes, ds.labels[i]))
      outside.push_back(i);
  }
  const auto n_distract = static_cast<std::size_t>(std::llround(pool.size * pool.distractor_fraction));
  const auto n_own = static_cast<std::size_t>(pool.size) - n_distract;
  if (in_episode.size() < n_own || outside.size() < n_distract)
    throw Error(ErrorCode::InsufficientData, "not enough videos for an unlabeled pool of " + std::to_string(pool.size));

  std::vector<std::size_t> picks;
  for (auto j : rng.choose(in_episode.size(), n_own)) picks.push_back(in_episode[j]);
  for (auto j : rng.choose(outside.size(), n_distract)) picks.push_back(outside[j]);
  rng.shuffle(picks);
  for (auto i : picks) e.unlabeled.push_back(detail::make_item(ds.videos[i], kUnknownLabel, ds.labels[i]));
  return e;
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

inline Matrix softmax_rows(const Matrix& logits) { return ag::Tape::softmax_rows(logits); }

/// Classifies every unlabeled video against the current support (embedded
/// jointly with the unlabeled set) and promotes those whose top softmax
/// probability reaches `tau` into `pseudo_support` under the predicted class.
/// Each round only considers videos not yet promoted; it stops early when a
/// round promotes nothing.
inline Episode pseudo_label_and_augment(const Episode& e, const RelationModelParams& params, MetricKind kind,
                                        Real tau, int rounds = 1) {
  validate_episode(e);
  Episode out = e;
  std::vector<bool> promoted(e.unlabeled.size(), false);
  for (const auto& pl : e.pseudo_labels)
    for (std::size_t i = 0; i < e.unlabeled.size(); ++i)
      if (e.unlabeled[i].sequence.video_id == pl.video_id) promoted[i] = true;

  for (int round = 0; round < rounds; ++round) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < e.unlabeled.size(); ++i)
      if (!promoted[i]) candidates.push_back(i);
    if (candidates.empty()) break;

    std::vector<const Matrix*> videos;
    for (const auto& it : out.support) videos.push_back(&it.sequence.frames);
    for (const auto& it : out.pseudo_support) videos.push_back(&it.sequence.frames);
    const std::size_t labeled = videos.size();
    for (auto i : candidates) videos.push_back(&e.unlabeled[i].sequence.frames);

    ag::Tape tape = ag::Tape::no_grad();
    const auto emb =
        embed_videos(tape, videos, params, params.config.pool == PoolMode::SupportOnly ? labeled : 0);
    std::vector<Matrix> support, queries;
    for (std::size_t i = 0; i < labeled; ++i) support.push_back(emb.enhanced[i].value());
    for (std::size_t i = labeled; i < videos.size(); ++i) queries.push_back(emb.enhanced[i].value());
    const Matrix probs =
        softmax_rows(logits_from_features(support, support_labels_with_pseudo(out), queries, e.n_way, kind));

    bool any = false;
    for (std::size_t r = 0; r < candidates.size(); ++r) {
      const auto row = static_cast<Eigen::Index>(r);
      const int pred = argmax_row(probs, row);
      const Real conf = probs(row, pred);
      if (!(conf >= tau)) continue;
      const auto& item = e.unlabeled[candidates[r]];
      out.pseudo_support.push_back(EpisodeItem{item.sequence, pred, kUnknownLabel});
      out.pseudo_labels.push_back({item.sequence.video_id, pred, conf});
      promoted[candidates[r]] = true;
      any = true;
    }
    if (!any) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct ClusterAssignment {
  std::string video_id;
  int cluster = 0;
};

struct KMeansResult {
  std::vector<int> assignment;
  Matrix centroids;
  Real inertia = 0.0;
  int iterations = 0;
};

inline Real kmeans_inertia(const Matrix& points, const Matrix& centroids, const std::vector<int>& assignment) {
  Real total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += (points.row(i) - centroids.row(assignment[static_cast<std::size_t>(i)])).squaredNorm();
  return total;
}

/// Lloyd iterations from k-means++ seeding on the rows of `points` (squared
/// Euclidean). A cluster that empties is re-seeded with the point farthest from
/// its current centroid. Stops at an assignment fixpoint or after max_iters.
inline KMeansResult kmeans(const Matrix& points, int n_clusters, Rng& rng, int max_iters = 100) {
  const Eigen::Index n = points.rows();
  if (n_clusters < 1) throw Error(ErrorCode::InvalidArgument, "n_clusters must be positive");
  if (n < n_clusters)
    throw Error(ErrorCode::TooFewPoints, std::to_string(n) + " points for " + std::to_string(n_clusters) + " clusters");
  const auto k = static_cast<Eigen::Index>(n_clusters);

  KMeansResult res;
  res.centroids.resize(k, points.cols());
  res.centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - res.centroids.row(0)).squaredNorm();
  for (Eigen::Index c = 1; c < k; ++c) {
    const Real total = d2.sum();
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      const Real target = rng.uniform() * total;
      Real run = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        run += d2(i);
        if (run > target && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    res.centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - res.centroids.row(c)).squaredNorm());
  }

  res.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      Real best_d = (points.row(i) - res.centroids.row(0)).squaredNorm();
      for (Eigen::Index c = 1; c < k; ++c) {
        const Real d = (points.row(i) - res.centroids.row(c)).squaredNorm();
        if (d < best_d) best_d = d, best = c;
      }
      if (res.assignment[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
        res.assignment[static_cast<std::size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    res.iterations = iter + 1;

    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : res.assignment) ++counts[static_cast<std::size_t>(a)];
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Eigen::Index far = 0;
      Real far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const int a = res.assignment[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(a)] < 2) continue;
        const Real d = (points.row(i) - res.centroids.row(a)).squaredNorm();
        if (d > far_d) far_d = d, far = i;
      }
      --counts[static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(far)])];
      res.assignment[static_cast<std::size_t>(far)] = static_cast<int>(c);
      counts[static_cast<std::size_t>(c)] = 1;
      changed = true;
    }

    Matrix sums = Matrix::Zero(k, points.cols());
    for (Eigen::Index i = 0; i < n; ++i) sums.row(res.assignment[static_cast<std::size_t>(i)]) += points.row(i);
    for (Eigen::Index c = 0; c < k; ++c) res.centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    if (!changed) break;
  }
  res.inertia = kmeans_inertia(points, res.centroids, res.assignment);
  return res;
}

/// Temporal mean of each video, optionally after the intra-relation path of a
/// trained model.
inline Matrix pooled_features(const std::vector<FeatureSequence>& videos, const RelationModelParams* params = nullptr) {
  if (videos.empty()) throw Error(ErrorCode::TooFewPoints, "no videos to pool");
  Matrix out(static_cast<Eigen::Index>(videos.size()), videos.front().channels());
  for (std::size_t i = 0; i < videos.size(); ++i) {
    if (params && params->config.use_intra) {
      ag::Tape tape = ag::Tape::no_grad();
      out.row(static_cast<Eigen::Index>(i)) =
          intra_relation(tape, tape.constant(videos[i].frames), *params).value().colwise().mean();
    } else {
      out.row(static_cast<Eigen::Index>(i)) = videos[i].frames.colwise().mean();
    }
  }
  return out;
}

inline std::vector<ClusterAssignment> kmeans_cluster(const std::vector<FeatureSequence>& videos, int n_clusters,
                                                     Rng& rng, int max_iters = 100,
                                                     const RelationModelParams* params = nullptr) {
  const KMeansResult res = kmeans(pooled_features(videos, params), n_clusters, rng, max_iters);
  std::vector<ClusterAssignment> out;
  out.reserve(videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i) out.push_back({videos[i].video_id, res.assignment[i]});
  return out;
}

// Desk-scale default: min(150, n_videos / 4), at least 1.
inline int default_cluster_count(std::size_t n_videos) {
  return std::max(1, static_cast<int>(std::min<std::size_t>(150, n_videos / 4)));
}

/// Clusters act as pseudo-classes; otherwise identical to sample_supervised.
inline Episode sample_unsupervised(const std::vector<ClusterAssignment>& assignments, const Dataset& ds,
                                   const EpisodeShape& shape, Rng& rng) {
  std::map<std::string, int> by_id;
  for (const auto& a : assignments)
    if (!by_id.emplace(a.video_id, a.cluster).second)
      throw Error(ErrorCode::InvalidArgument, "video '" + a.video_id + "' assigned twice");
  std::vector<int> labels;
  labels.reserve(ds.size());
  for (const auto& v : ds.videos) {
    auto it = by_id.find(v.video_id);
    if (it == by_id.end()) throw Error(ErrorCode::InvalidArgument, "video '" + v.video_id + "' has no cluster");
    labels.push_back(it->second);
  }
  return sample_from_labels(ds.videos, labels, shape, rng);
}

}  // namespace hyrsm
