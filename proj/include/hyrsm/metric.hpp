#pragma once

// Frame-set distances between two feature sequences.
//
// Every metric consumes a DistanceMatrix D with D(a, b) the cosine distance
// between frame a of the first sequence (support side) and frame b of the
// second (query side). Value kernels are templated on the scalar type; the
// `*_on_tape` variants build the same quantity from gradient-engine primitives
// for training.

#include "hyrsm/autograd.hpp"
#include "hyrsm/core.hpp"

#include <array>
#include <optional>
#include <string_view>

namespace hyrsm {

enum class MetricKind {
  Hausdorff,                 // directed max-min, support -> query
  HausdorffBidirectional,    // max of both directed max-min terms
  ModifiedHausdorffDirected, // mean-min, support -> query
  BiMHM,                     // sum of both mean-min terms
  Diagonal,                  // frame-by-frame mean
  PlainDTW,
};

inline constexpr std::array<MetricKind, 6> kAllMetrics = {
    MetricKind::Hausdorff, MetricKind::HausdorffBidirectional, MetricKind::ModifiedHausdorffDirected,
    MetricKind::BiMHM,     MetricKind::Diagonal,               MetricKind::PlainDTW};

inline std::string_view metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::Hausdorff: return "hausdorff";
    case MetricKind::HausdorffBidirectional: return "bihausdorff";
    case MetricKind::ModifiedHausdorffDirected: return "mhd";
    case MetricKind::BiMHM: return "bimhm";
    case MetricKind::Diagonal: return "diagonal";
    case MetricKind::PlainDTW: return "dtw";
  }
  throw Error(ErrorCode::UnknownMetric, "metric id " + std::to_string(static_cast<int>(kind)));
}

inline MetricKind parse_metric(std::string_view name) {
  for (auto kind : kAllMetrics)
    if (metric_name(kind) == name) return kind;
  throw Error(ErrorCode::UnknownMetric, "unknown metric '" + std::string(name) + "'");
}

template <typename Scalar>
using DistanceMatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using DistanceMatrix = DistanceMatrixT<Real>;

/// D(a, b) = 1 - cos(x_a, y_b), clipped to [0, 2] against rounding.
template <typename DerivedX, typename DerivedY>
DistanceMatrixT<typename DerivedX::Scalar> frame_distances(const Eigen::MatrixBase<DerivedX>& x,
                                                           const Eigen::MatrixBase<DerivedY>& y) {
  using Scalar = typename DerivedX::Scalar;
  DistanceMatrixT<Scalar> d = cosine_similarity(x, y);
  d = (Scalar(1) - d.array()).max(Scalar(0)).min(Scalar(2)).matrix();
  return d;
}

namespace detail {

// Fixed-order scalar reductions: the row-side pass over D and the column-side
// pass over D^T visit the same numbers in the same order.
template <typename Scalar>
std::vector<Scalar> row_mins(const DistanceMatrixT<Scalar>& d) {
  std::vector<Scalar> out(static_cast<std::size_t>(d.rows()));
  for (Eigen::Index a = 0; a < d.rows(); ++a) {
    Scalar m = d(a, 0);
    for (Eigen::Index b = 1; b < d.cols(); ++b) m = std::min(m, d(a, b));
    out[static_cast<std::size_t>(a)] = m;
  }
  return out;
}

template <typename Scalar>
std::vector<Scalar> col_mins(const DistanceMatrixT<Scalar>& d) {
  std::vector<Scalar> out(static_cast<std::size_t>(d.cols()));
  for (Eigen::Index b = 0; b < d.cols(); ++b) {
    Scalar m = d(0, b);
    for (Eigen::Index a = 1; a < d.rows(); ++a) m = std::min(m, d(a, b));
    out[static_cast<std::size_t>(b)] = m;
  }
  return out;
}

template <typename Scalar>
Scalar mean_of(const std::vector<Scalar>& v) {
  Scalar s = 0;
  for (Scalar x : v) s += x;
  return s / static_cast<Scalar>(v.size());
}

template <typename Scalar>
Scalar max_of(const std::vector<Scalar>& v) {
  return *std::max_element(v.begin(), v.end());
}

}  // namespace detail

template <typename Scalar>
Scalar directed_hausdorff(const DistanceMatrixT<Scalar>& d) {
  return detail::max_of(detail::row_mins(d));
}

/// Standard Hausdorff: max_a min_b D when directed, and the max of both
/// directions when bidirectional.
template <typename Scalar>
Scalar hausdorff(const DistanceMatrixT<Scalar>& d, bool bidirectional) {
  const Scalar forward = detail::max_of(detail::row_mins(d));
  if (!bidirectional) return forward;
  return std::max(forward, detail::max_of(detail::col_mins(d)));
}

/// Mean over support frames of the nearest query-frame distance.
template <typename Scalar>
Scalar modified_hausdorff_directed(const DistanceMatrixT<Scalar>& d) {
  return detail::mean_of(detail::row_mins(d));
}

/// Bidirectional mean Hausdorff: both directed mean-min terms added.
template <typename Scalar>
Scalar bi_mhm(const DistanceMatrixT<Scalar>& d) {
  return detail::mean_of(detail::row_mins(d)) + detail::mean_of(detail::col_mins(d));
}

template <typename Scalar>
Scalar diagonal_distance(const DistanceMatrixT<Scalar>& d) {
  if (d.rows() != d.cols())
    throw Error(ErrorCode::NotSquare, "diagonal matching needs equal lengths, got " + std::to_string(d.rows()) +
                                          "x" + std::to_string(d.cols()));
  Scalar s = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) s += d(i, i);
  return s / static_cast<Scalar>(d.rows());
}

template <typename Scalar>
Scalar dtw_distance(const DistanceMatrixT<Scalar>& d) {
  const Matrix acc = ag::Tape::dtw_accumulate(d.template cast<Real>());
  return static_cast<Scalar>(acc(acc.rows() - 1, acc.cols() - 1) / static_cast<Real>(d.rows() + d.cols()));
}

template <typename Scalar>
Scalar metric_distance(const DistanceMatrixT<Scalar>& d, MetricKind kind) {
  switch (kind) {
    case MetricKind::Hausdorff: return hausdorff(d, false);
    case MetricKind::HausdorffBidirectional: return hausdorff(d, true);
    case MetricKind::ModifiedHausdorffDirected: return modified_hausdorff_directed(d);
    case MetricKind::BiMHM: return bi_mhm(d);
    case MetricKind::Diagonal: return diagonal_distance(d);
    case MetricKind::PlainDTW: return dtw_distance(d);
  }
  throw Error(ErrorCode::UnknownMetric, "metric id " + std::to_string(static_cast<int>(kind)));
}

template <typename DerivedX, typename DerivedY>
typename DerivedX::Scalar sequence_distance(const Eigen::MatrixBase<DerivedX>& support,
                                            const Eigen::MatrixBase<DerivedY>& query, MetricKind kind) {
  return metric_distance(frame_distances(support, query), kind);
}

// One row of the correspondence table: frame a of the first sequence matched to
// its nearest frame of the second (lowest index on ties).
struct FrameMatch {
  Eigen::Index frame = 0;
  Eigen::Index match = 0;
  Real distance = 0.0;
};

inline std::vector<FrameMatch> nearest_frames(const DistanceMatrix& d) {
  std::vector<FrameMatch> out;
  out.reserve(static_cast<std::size_t>(d.rows()));
  for (Eigen::Index a = 0; a < d.rows(); ++a) {
    Eigen::Index best = 0;
    for (Eigen::Index b = 1; b < d.cols(); ++b)
      if (d(a, b) < d(a, best)) best = b;
    out.push_back({a, best, d(a, best)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable variants
// ---------------------------------------------------------------------------

inline ag::Tensor frame_distances_on_tape(ag::Tape& tape, const ag::Tensor& x, const ag::Tensor& y) {
  return tape.add_scalar(tape.scale(tape.cosine_similarity_rows(x, y), -1.0), 1.0);
}

inline ag::Tensor metric_on_tape(ag::Tape& tape, const ag::Tensor& d, MetricKind kind) {
  switch (kind) {
    case MetricKind::Hausdorff: return tape.max_all(tape.row_min(d));
    case MetricKind::HausdorffBidirectional:
      return tape.max_all(tape.concat_rows({tape.max_all(tape.row_min(d)), tape.max_all(tape.col_min(d))}));
    case MetricKind::ModifiedHausdorffDirected: return tape.mean(tape.row_min(d));
    case MetricKind::BiMHM: return tape.add(tape.mean(tape.row_min(d)), tape.mean(tape.col_min(d)));
    case MetricKind::Diagonal: {
      if (d.rows() != d.cols()) throw Error(ErrorCode::NotSquare, "diagonal matching needs equal lengths");
      const Matrix eye = Matrix::Identity(d.rows(), d.cols()) / static_cast<Real>(d.rows());
      return tape.sum(tape.mul(d, tape.constant(eye)));
    }
    case MetricKind::PlainDTW: return tape.dtw_cost(d);
  }
  throw Error(ErrorCode::UnknownMetric, "metric id " + std::to_string(static_cast<int>(kind)));
}

// ---------------------------------------------------------------------------
// Episode classification
// ---------------------------------------------------------------------------

// Members of each class: the original support plus any pseudo-labeled videos.
// Prototype of a class = frame-wise mean of its members (T x C is preserved).
inline std::vector<Matrix> class_prototypes(const std::vector<Matrix>& support, const std::vector<int>& support_labels,
                                            int n_way) {
  if (support.size() != support_labels.size())
    throw Error(ErrorCode::ShapeMismatch, "support features and labels differ in length");
  std::vector<Matrix> protos(static_cast<std::size_t>(n_way));
  std::vector<int> counts(static_cast<std::size_t>(n_way), 0);
  for (std::size_t i = 0; i < support.size(); ++i) {
    const int c = support_labels[i];
    if (c < 0 || c >= n_way) throw Error(ErrorCode::LabelOutOfRange, "support label " + std::to_string(c));
    auto& p = protos[static_cast<std::size_t>(c)];
    if (counts[static_cast<std::size_t>(c)]++ == 0)
      p = support[i];
    else
      p += support[i];
  }
  for (int c = 0; c < n_way; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw Error(ErrorCode::CardinalityError, "class " + std::to_string(c) + " has no support");
    protos[static_cast<std::size_t>(c)] /= static_cast<Real>(counts[static_cast<std::size_t>(c)]);
  }
  return protos;
}

/// logits(q, c) = -distance(prototype_c, query_q) under `kind`.
inline Matrix logits_from_features(const std::vector<Matrix>& support, const std::vector<int>& support_labels,
                                   const std::vector<Matrix>& queries, int n_way, MetricKind kind) {
  const auto protos = class_prototypes(support, support_labels, n_way);
  Matrix logits(static_cast<Eigen::Index>(queries.size()), n_way);
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (int c = 0; c < n_way; ++c)
      logits(static_cast<Eigen::Index>(q), c) =
          -sequence_distance(protos[static_cast<std::size_t>(c)], queries[q], kind);
  return logits;
}

inline ag::Tensor logits_on_tape(ag::Tape& tape, const std::vector<ag::Tensor>& support,
                                 const std::vector<int>& support_labels, const std::vector<ag::Tensor>& queries,
                                 int n_way, MetricKind kind) {
  if (support.size() != support_labels.size())
    throw Error(ErrorCode::ShapeMismatch, "support features and labels differ in length");
  std::vector<ag::Tensor> protos;
  for (int c = 0; c < n_way; ++c) {
    ag::Tensor acc;
    int count = 0;
    for (std::size_t i = 0; i < support.size(); ++i) {
      if (support_labels[i] != c) continue;
      acc = count++ == 0 ? support[i] : tape.add(acc, support[i]);
    }
    if (count == 0) throw Error(ErrorCode::CardinalityError, "class " + std::to_string(c) + " has no support");
    protos.push_back(count == 1 ? acc : tape.scale(acc, 1.0 / count));
  }
  std::vector<ag::Tensor> rows;
  rows.reserve(queries.size());
  for (const auto& q : queries) {
    std::vector<ag::Tensor> row;
    row.reserve(protos.size());
    for (const auto& p : protos) row.push_back(metric_on_tape(tape, frame_distances_on_tape(tape, p, q), kind));
    rows.push_back(tape.concat_cols(row));
  }
  return tape.scale(tape.concat_rows(rows), -1.0);
}

/// Lowest index wins ties.
inline int argmax_row(const Matrix& logits, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < logits.cols(); ++c)
    if (logits(row, c) > logits(row, best)) best = c;
  return static_cast<int>(best);
}

}  // namespace hyrsm
