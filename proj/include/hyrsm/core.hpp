#pragma once

// Shared domain types, numeric conventions, errors and deterministic randomness.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace hyrsm {

// All library math runs in `Real`. Bulk kernels in metric.hpp are templated and
// also accept 32-bit inputs.
using Real = double;
inline constexpr int kRealBits = 64;
inline constexpr int real_bits() noexcept { return kRealBits; }

using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

inline constexpr int kUnknownLabel = -1;

enum class ErrorCode {
  ShapeMismatch,
  CardinalityError,
  NotScalar,
  DetachedTensor,
  EmptyEpisode,
  NotSquare,
  UnknownMetric,
  LabelOutOfRange,
  TooShort,
  BadWindow,
  InsufficientData,
  TooFewPoints,
  BadMagic,
  TruncatedFile,
  UnsupportedDtype,
  IoError,
  NonFiniteLoss,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::CardinalityError: return "CardinalityError";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::DetachedTensor: return "DetachedTensor";
    case ErrorCode::EmptyEpisode: return "EmptyEpisode";
    case ErrorCode::NotSquare: return "NotSquare";
    case ErrorCode::UnknownMetric: return "UnknownMetric";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::BadWindow: return "BadWindow";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed for the `ordinal`-th independent sub-stream of `base`.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t ordinal) noexcept {
  return splitmix64(splitmix64(base) ^ splitmix64(ordinal + 0x632BE59BD9B4E019ULL));
}

/// Deterministic generator: std::mt19937_64 (its output sequence is fixed by the
/// C++ standard) with hand-rolled distributions, because the std:: distribution
/// algorithms are implementation-defined and would break cross-platform streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  static constexpr std::string_view algorithm() noexcept { return "mt19937_64"; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  Real uniform() { return static_cast<Real>(engine_() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased via rejection.
  std::size_t index(std::size_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "Rng::index with n == 0");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % bound);
  }

  // Standard normal via Box-Muller; caches nothing so the stream position is
  // a pure function of the number of calls.
  Real normal() {
    Real u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Real u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Real normal(Real mean, Real stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
    if (k > n) throw Error(ErrorCode::InvalidArgument, "cannot choose more items than available");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + index(n - i)]);
    pool.resize(k);
    return pool;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// One video: T frames (rows, temporal order) by C channels.
struct FeatureSequence {
  Matrix frames;
  std::string video_id;

  Eigen::Index length() const noexcept { return frames.rows(); }
  Eigen::Index channels() const noexcept { return frames.cols(); }
};

inline void validate_sequence(const FeatureSequence& f) {
  if (f.frames.rows() < 1 || f.frames.cols() < 1)
    throw Error(ErrorCode::ShapeMismatch, "sequence '" + f.video_id + "' is empty");
  if (!f.frames.allFinite())
    throw Error(ErrorCode::InvalidArgument, "sequence '" + f.video_id + "' has non-finite entries");
}

struct EpisodeItem {
  FeatureSequence sequence;
  // Episode-local class in [0, n_way), or kUnknownLabel.
  int label = kUnknownLabel;
  // Index into the dataset LabelSpace (or cluster id in the unsupervised regime).
  // For unlabeled items this is hidden ground truth kept for diagnostics only.
  int global_label = kUnknownLabel;
};

struct PseudoLabel {
  std::string video_id;
  int predicted = kUnknownLabel;
  Real confidence = 0.0;
};

/// A sampled N-way K-shot task. `pseudo_support` holds unlabeled videos promoted
/// by pseudo-labeling; original support entries are never modified.
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;
  std::vector<EpisodeItem> unlabeled;
  std::vector<EpisodeItem> pseudo_support;
  std::vector<PseudoLabel> pseudo_labels;
};

/// Dense class-name to index mapping over the training classes.
class LabelSpace {
 public:
  LabelSpace() = default;

  // Indices follow the sorted order of names.
  explicit LabelSpace(std::vector<std::string> names) {
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    names_ = std::move(names);
    for (std::size_t i = 0; i < names_.size(); ++i) index_[names_[i]] = static_cast<int>(i);
  }

  int size() const noexcept { return static_cast<int>(names_.size()); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::LabelOutOfRange, "unknown class '" + name + "'");
    return it->second;
  }

  const std::string& name_of(int idx) const {
    if (idx < 0 || idx >= size()) throw Error(ErrorCode::LabelOutOfRange, "class index " + std::to_string(idx));
    return names_[static_cast<std::size_t>(idx)];
  }

  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> index_;
};

inline void validate_episode(const Episode& e) {
  if (e.n_way < 1 || e.k_shot < 1)
    throw Error(ErrorCode::CardinalityError, "n_way and k_shot must be positive");
  if (e.support.empty()) throw Error(ErrorCode::CardinalityError, "empty support set");

  const auto rows = e.support.front().sequence.frames.rows();
  const auto cols = e.support.front().sequence.frames.cols();
  auto check_shape = [&](const std::vector<EpisodeItem>& items, const char* part) {
    for (const auto& item : items) {
      validate_sequence(item.sequence);
      if (item.sequence.frames.rows() != rows || item.sequence.frames.cols() != cols)
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(part) + " sequence '" + item.sequence.video_id + "' is " +
                        shape_str(item.sequence.frames) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
  };
  check_shape(e.support, "support");
  check_shape(e.query, "query");
  check_shape(e.unlabeled, "unlabeled");
  check_shape(e.pseudo_support, "pseudo-support");

  if (e.support.size() != static_cast<std::size_t>(e.n_way) * static_cast<std::size_t>(e.k_shot))
    throw Error(ErrorCode::CardinalityError, "support has " + std::to_string(e.support.size()) +
                                                 " entries, expected n_way * k_shot");
  std::vector<int> counts(static_cast<std::size_t>(e.n_way), 0);
  for (const auto& item : e.support) {
    if (item.label < 0 || item.label >= e.n_way)
      throw Error(ErrorCode::CardinalityError, "support label " + std::to_string(item.label) + " outside [0, n_way)");
    ++counts[static_cast<std::size_t>(item.label)];
  }
  for (int c = 0; c < e.n_way; ++c)
    if (counts[static_cast<std::size_t>(c)] != e.k_shot)
      throw Error(ErrorCode::CardinalityError, "class " + std::to_string(c) + " appears " +
                                                   std::to_string(counts[static_cast<std::size_t>(c)]) +
                                                   " times in support, expected " + std::to_string(e.k_shot));
  for (const auto& item : e.query)
    if (item.label != kUnknownLabel && (item.label < 0 || item.label >= e.n_way))
      throw Error(ErrorCode::CardinalityError, "query label " + std::to_string(item.label) + " outside [0, n_way)");
  for (const auto& item : e.pseudo_support)
    if (item.label < 0 || item.label >= e.n_way)
      throw Error(ErrorCode::CardinalityError, "pseudo-support label outside [0, n_way)");
}

// ---------------------------------------------------------------------------
// Cosine similarity convention
// ---------------------------------------------------------------------------

// The denominator is clamped from below so zero-vector frames stay finite while
// cos(v, v) of any non-degenerate frame is 1 to rounding.
inline constexpr Real kCosineEpsilon = 1e-8;

// S(a, b) = x_a . y_b / max(|x_a| |y_b|, eps)
template <typename DerivedX, typename DerivedY>
auto cosine_similarity(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
  using Scalar = typename DerivedX::Scalar;
  using Out = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (x.cols() != y.cols())
    throw Error(ErrorCode::ShapeMismatch, "cosine similarity needs equal channel counts, got " +
                                              std::to_string(x.cols()) + " and " + std::to_string(y.cols()));
  const auto xn = x.rowwise().norm().eval();
  const auto yn = y.rowwise().norm().eval();
  // Pairwise dots rather than a GEMM: swapping the arguments then yields the
  // exact transpose, which keeps symmetric metrics bitwise symmetric.
  Out s(x.rows(), y.rows());
  const Scalar eps = static_cast<Scalar>(kCosineEpsilon);
  for (Eigen::Index a = 0; a < s.rows(); ++a)
    for (Eigen::Index b = 0; b < s.cols(); ++b)
      s(a, b) = x.row(a).dot(y.row(b)) / std::max(xn(a) * yn(b), eps);
  return s;
}

// ---------------------------------------------------------------------------
// Threading helper
// ---------------------------------------------------------------------------

inline unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1U : hw;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers with a static stride
// split. Results must be written to per-index slots for determinism.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    workers.reserve(threads);
    for (unsigned w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += threads) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace hyrsm
