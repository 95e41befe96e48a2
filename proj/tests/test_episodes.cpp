#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace hyrsm;

namespace {

// `per_class[c]` videos of class c, each a distinct random sequence.
Dataset make_dataset(const std::vector<int>& per_class, std::uint64_t seed = 1, int frames = 4, int channels = 6) {
  Rng rng(seed);
  Dataset ds;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < per_class.size(); ++c) names.push_back("c" + std::to_string(100 + c));
  ds.label_space = LabelSpace(names);
  for (std::size_t c = 0; c < per_class.size(); ++c)
    for (int v = 0; v < per_class[c]; ++v) {
      ds.videos.push_back({oracle::random_matrix(rng, frames, channels),
                           "c" + std::to_string(c) + "_" + std::to_string(v)});
      ds.labels.push_back(static_cast<int>(c));
    }
  return ds;
}

std::set<std::string> ids(const std::vector<EpisodeItem>& items) {
  std::set<std::string> out;
  for (const auto& it : items) out.insert(it.sequence.video_id);
  return out;
}

RelationConfig small_config(int channels = 6, int frames = 4) {
  RelationConfig c;
  c.channels = channels;
  c.heads = 2;
  c.max_frames = frames;
  c.corr_dim = 4;
  return c;
}

}  // namespace

TEST(Sampling, ShapeAndLabels) {
  const auto ds = make_dataset(std::vector<int>(8, 5));
  Rng rng(2);
  const Episode e = sample_supervised(ds, {5, 2, 3}, rng);
  ASSERT_EQ(e.support.size(), 10U);
  ASSERT_EQ(e.query.size(), 15U);
  EXPECT_EQ(e.n_way, 5);
  EXPECT_EQ(e.k_shot, 2);
  for (int c = 0; c < 5; ++c)
    for (int k = 0; k < 2; ++k) EXPECT_EQ(e.support[static_cast<std::size_t>(c * 2 + k)].label, c);
  std::map<int, int> local_to_global;
  for (const auto* part : {&e.support, &e.query})
    for (const auto& it : *part) {
      ASSERT_GE(it.label, 0);
      ASSERT_LT(it.label, 5);
      auto [pos, fresh] = local_to_global.emplace(it.label, it.global_label);
      EXPECT_EQ(pos->second, it.global_label);
      EXPECT_EQ(std::stoi(it.sequence.video_id.substr(1)), it.global_label);
    }
  std::set<int> globals;
  for (const auto& [l, g] : local_to_global) globals.insert(g);
  EXPECT_EQ(globals.size(), 5U);
  EXPECT_NO_THROW(validate_episode(e));
}

TEST(Sampling, SupportAndQueryAreDisjoint) {
  const auto ds = make_dataset(std::vector<int>(10, 6), 3);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const Episode e = sample_supervised(ds, {5, 3, 3}, rng);
    const auto s = ids(e.support), q = ids(e.query);
    EXPECT_EQ(s.size(), e.support.size());
    EXPECT_EQ(q.size(), e.query.size());
    for (const auto& id : s) EXPECT_EQ(q.count(id), 0U);
  }
}

TEST(Sampling, SameSeedSameEpisode) {
  const auto ds = make_dataset(std::vector<int>(12, 4), 5);
  Rng a(42), b(42);
  for (int i = 0; i < 20; ++i) {
    const Episode x = sample_supervised(ds, {5, 1, 2}, a), y = sample_supervised(ds, {5, 1, 2}, b);
    EXPECT_EQ(ids(x.support), ids(y.support));
    for (std::size_t j = 0; j < x.query.size(); ++j)
      EXPECT_EQ(x.query[j].sequence.video_id, y.query[j].sequence.video_id);
  }
}

TEST(Sampling, ExactlyEnoughVideosForcesAssignment) {
  const int n = 5, k = 2;
  const auto ds = make_dataset(std::vector<int>(n, k + 1), 6);
  Rng rng(7);
  const Episode e = sample_supervised(ds, {n, k, 1}, rng);
  std::set<std::string> all;
  for (const auto& it : e.support) all.insert(it.sequence.video_id);
  for (const auto& it : e.query) all.insert(it.sequence.video_id);
  EXPECT_EQ(all.size(), ds.size());
  for (const auto& it : e.query) {
    // the query is the one video of its class not in support
    int same = 0;
    for (const auto& s : e.support) same += s.global_label == it.global_label && s.label == it.label;
    EXPECT_EQ(same, k);
  }
}

TEST(Sampling, ClassesDrawnUniformly) {
  const int classes = 24, way = 5, trials = 10000;
  const auto ds = make_dataset(std::vector<int>(classes, 2), 8, 2, 2);
  Rng rng(9);
  std::vector<int> hits(classes, 0);
  for (int i = 0; i < trials; ++i) {
    const Episode e = sample_supervised(ds, {way, 1, 1}, rng);
    for (const auto& it : e.support) ++hits[static_cast<std::size_t>(it.global_label)];
  }
  const double p = static_cast<double>(way) / classes;
  const double mean = trials * p, sigma = std::sqrt(trials * p * (1 - p));
  for (int c = 0; c < classes; ++c) EXPECT_LT(std::abs(hits[static_cast<std::size_t>(c)] - mean), 3 * sigma) << c;
}

TEST(Sampling, TooFewClassesIsInsufficientData) {
  const auto ds = make_dataset({3, 3, 3, 1, 1}, 10);
  Rng rng(1);
  try {
    (void)sample_supervised(ds, {4, 1, 1}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
  }
  EXPECT_NO_THROW((void)sample_supervised(ds, {3, 1, 1}, rng));
}

TEST(SemiSupervised, PoolComposition) {
  const auto ds = make_dataset(std::vector<int>(12, 12), 11);
  Rng rng(12);
  UnlabeledPoolSpec pool{20, 0.4};
  const Episode e = sample_semi_supervised(ds, {5, 1, 2}, pool, rng);
  ASSERT_EQ(e.unlabeled.size(), 20U);
  std::set<int> episode_classes;
  for (const auto& it : e.support) episode_classes.insert(it.global_label);
  int outside = 0;
  const auto s = ids(e.support), q = ids(e.query);
  for (const auto& it : e.unlabeled) {
    EXPECT_EQ(it.label, kUnknownLabel);
    outside += episode_classes.count(it.global_label) == 0;
    EXPECT_EQ(s.count(it.sequence.video_id), 0U);
    EXPECT_EQ(q.count(it.sequence.video_id), 0U);
  }
  EXPECT_EQ(outside, 8);
  EXPECT_EQ(ids(e.unlabeled).size(), 20U);
}

TEST(PseudoLabel, IdenticalVideoJoinsItsClass) {
  const auto ds = make_dataset(std::vector<int>(5, 3), 13);
  Rng rng(14);
  Episode e = sample_supervised(ds, {5, 1, 1}, rng);
  Rng prng(1);
  const auto params = oracle::random_params(small_config(), prng);
  EpisodeItem copy = e.support[3];
  copy.sequence.video_id = "copy";
  copy.label = kUnknownLabel;
  e.unlabeled.push_back(copy);

  const Episode probe = pseudo_label_and_augment(e, params, MetricKind::BiMHM, 0.0);
  ASSERT_EQ(probe.pseudo_labels.size(), 1U);
  EXPECT_EQ(probe.pseudo_labels[0].predicted, 3);
  const Real score = probe.pseudo_labels[0].confidence;
  EXPECT_GT(score, 0.2);

  const Episode out = pseudo_label_and_augment(e, params, MetricKind::BiMHM, score);
  ASSERT_EQ(out.pseudo_support.size(), 1U);
  EXPECT_EQ(out.pseudo_support[0].label, 3);
  EXPECT_EQ(out.pseudo_labels[0].video_id, "copy");
  EXPECT_TRUE(pseudo_label_and_augment(e, params, MetricKind::BiMHM, std::nextafter(score, 2.0)).pseudo_support.empty());
  EXPECT_EQ(ids(out.support), ids(e.support));
}

TEST(PseudoLabel, ThresholdAboveOneAddsNothing) {
  const auto ds = make_dataset(std::vector<int>(8, 6), 15);
  Rng rng(16);
  const Episode e = sample_semi_supervised(ds, {5, 1, 1}, {10, 0.4}, rng);
  Rng prng(3);
  const auto params = oracle::random_params(small_config(), prng);
  const Episode out = pseudo_label_and_augment(e, params, MetricKind::BiMHM, 1.0 + 1e-12, 3);
  EXPECT_TRUE(out.pseudo_support.empty());
  EXPECT_TRUE(out.pseudo_labels.empty());
  EXPECT_EQ(ids(out.support), ids(e.support));
}

TEST(PseudoLabel, NeverRelabelsSupportOrLeavesTheEpisode) {
  Rng prng(5);
  const auto params = oracle::random_params(small_config(), prng);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = make_dataset(std::vector<int>(8, 6), 20 + seed);
    Rng rng(seed);
    const Episode e = sample_semi_supervised(ds, {5, 1, 1}, {12, 0.5}, rng);
    const Episode out = pseudo_label_and_augment(e, params, MetricKind::BiMHM, 0.0, 2);
    EXPECT_EQ(out.pseudo_support.size(), e.unlabeled.size());
    ASSERT_EQ(out.support.size(), e.support.size());
    for (std::size_t i = 0; i < e.support.size(); ++i) {
      EXPECT_EQ(out.support[i].label, e.support[i].label);
      EXPECT_EQ(out.support[i].sequence.video_id, e.support[i].sequence.video_id);
    }
    for (const auto& it : out.pseudo_support) {
      EXPECT_GE(it.label, 0);
      EXPECT_LT(it.label, 5);
    }
    EXPECT_NO_THROW(validate_episode(out));
  }
}

TEST(KMeans, TwoObviousPairs) {
  Matrix pts(4, 2);
  pts << 0, 0, 0.1, 0, 10, 10, 10, 10.1;
  Rng rng(1);
  const auto r = kmeans(pts, 2, rng);
  EXPECT_EQ(r.assignment[0], r.assignment[1]);
  EXPECT_EQ(r.assignment[2], r.assignment[3]);
  EXPECT_NE(r.assignment[0], r.assignment[2]);
  EXPECT_NEAR(r.inertia, 0.01, 1e-12);
}

TEST(KMeans, OneClusterPerPointHasZeroInertia) {
  Rng data(2);
  const Matrix pts = oracle::random_matrix(data, 9, 3);
  Rng rng(3);
  const auto r = kmeans(pts, 9, rng);
  EXPECT_EQ(r.inertia, 0.0);
  EXPECT_EQ(std::set<int>(r.assignment.begin(), r.assignment.end()).size(), 9U);
}

TEST(KMeans, InertiaCloseToBestOfManyRestarts) {
  Rng data(4);
  Matrix pts(50, 2);
  const double centers[4][2] = {{0, 0}, {5, 0}, {0, 5}, {5, 5}};
  for (int i = 0; i < 50; ++i) {
    pts(i, 0) = centers[i % 4][0] + 0.5 * data.normal();
    pts(i, 1) = centers[i % 4][1] + 0.5 * data.normal();
  }
  Real best = std::numeric_limits<Real>::infinity();
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(1000 + s);
    best = std::min(best, kmeans(pts, 4, rng).inertia);
  }
  Rng rng(7);
  const auto r = kmeans(pts, 4, rng);
  EXPECT_LE(r.inertia, 1.05 * best);
  EXPECT_NEAR(r.inertia, kmeans_inertia(pts, r.centroids, r.assignment), 1e-9);
  // every point sits with its nearest centroid
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const Real own = (pts.row(i) - r.centroids.row(r.assignment[static_cast<std::size_t>(i)])).squaredNorm();
    for (Eigen::Index c = 0; c < 4; ++c) EXPECT_LE(own, (pts.row(i) - r.centroids.row(c)).squaredNorm() + 1e-12);
  }
}

TEST(KMeans, MoreClustersThanPoints) {
  Rng rng(1);
  try {
    (void)kmeans(Matrix::Zero(3, 2), 4, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewPoints);
  }
  EXPECT_THROW((void)kmeans(Matrix::Zero(3, 2), 0, rng), Error);
}

TEST(KMeans, DuplicatePointsLeaveNoClusterEmpty) {
  Matrix pts = Matrix::Zero(6, 2);
  pts(5, 0) = 1.0;
  Rng rng(2);
  const auto r = kmeans(pts, 3, rng);
  ASSERT_EQ(r.assignment.size(), 6U);
  std::vector<int> count(3, 0);
  for (int a : r.assignment) ++count[static_cast<std::size_t>(a)];
  for (int c : count) EXPECT_GE(c, 1);
}

TEST(KMeans, DefaultClusterCount) {
  EXPECT_EQ(default_cluster_count(0), 1);
  EXPECT_EQ(default_cluster_count(100), 25);
  EXPECT_EQ(default_cluster_count(10000), 150);
}

TEST(Unsupervised, ClustersMatchingLabelsReproduceSupervised) {
  const auto ds = make_dataset(std::vector<int>(7, 4), 30);
  std::vector<ClusterAssignment> mirror;
  for (std::size_t i = 0; i < ds.size(); ++i) mirror.push_back({ds.videos[i].video_id, ds.labels[i]});
  Rng a(5), b(5);
  for (int i = 0; i < 10; ++i) {
    const Episode x = sample_unsupervised(mirror, ds, {5, 1, 2}, a), y = sample_supervised(ds, {5, 1, 2}, b);
    ASSERT_EQ(x.support.size(), y.support.size());
    for (std::size_t j = 0; j < x.support.size(); ++j) {
      EXPECT_EQ(x.support[j].sequence.video_id, y.support[j].sequence.video_id);
      EXPECT_EQ(x.support[j].global_label, y.support[j].global_label);
    }
    for (std::size_t j = 0; j < x.query.size(); ++j) EXPECT_EQ(x.query[j].sequence.video_id, y.query[j].sequence.video_id);
  }
}

TEST(Unsupervised, SingleClusterCannotFormEpisodes) {
  const auto ds = make_dataset(std::vector<int>(6, 4), 31);
  std::vector<ClusterAssignment> one;
  for (const auto& v : ds.videos) one.push_back({v.video_id, 0});
  Rng rng(1);
  try {
    (void)sample_unsupervised(one, ds, {5, 1, 1}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
  }
}

TEST(Unsupervised, ClusteringSeparatedClasses) {
  SynthSpec s;
  s.n_classes = 6;
  s.test_classes = 0;
  s.videos_per_class = 8;
  s.noise_sigma = 0.02;
  s.seed = 3;
  const auto corpus = synthesize(s);
  Rng rng(4);
  const auto assign = kmeans_cluster(corpus.videos, 6, rng);
  ASSERT_EQ(assign.size(), corpus.videos.size());
  // every cluster is pure
  std::map<int, std::set<int>> classes_in;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    EXPECT_EQ(assign[i].video_id, corpus.videos[i].video_id);
    classes_in[assign[i].cluster].insert(corpus.true_class[i]);
  }
  for (const auto& [c, set] : classes_in) EXPECT_EQ(set.size(), 1U) << c;
}
