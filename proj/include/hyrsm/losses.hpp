#pragma once

// Training objective: episode cross-entropy on negative-distance logits, the
// auxiliary classification loss over global classes, and temporal-coherence
// regularizers on enhanced frame features.

#include "hyrsm/autograd.hpp"
#include "hyrsm/metric.hpp"
#include "hyrsm/relation.hpp"

#include <optional>

namespace hyrsm {

enum class CoherenceKind {
  IDM,         // all pairs pulled together with weight 1 / ((a - b)^2 + 1)
  HardMargin,  // adjacent pairs pulled, others pushed beyond a fixed margin
  SmoothTCR,   // windowed pull, Gaussian-ramped margin outside the window
};

inline std::string_view coherence_name(std::optional<CoherenceKind> kind) {
  if (!kind) return "none";
  switch (*kind) {
    case CoherenceKind::IDM: return "idm";
    case CoherenceKind::HardMargin: return "hard";
    case CoherenceKind::SmoothTCR: return "smooth";
  }
  return "none";
}

inline std::optional<CoherenceKind> parse_coherence(std::string_view name) {
  if (name == "none") return std::nullopt;
  if (name == "idm") return CoherenceKind::IDM;
  if (name == "hard") return CoherenceKind::HardMargin;
  if (name == "smooth") return CoherenceKind::SmoothTCR;
  throw Error(ErrorCode::InvalidArgument, "unknown coherence kind '" + std::string(name) + "'");
}

struct LossWeights {
  Real lambda_aux = 1.0;
  Real lambda_tcr = 0.1;
  Real margin = 0.5;
  int window = 2;
  Real sigma = 1.0;

  void validate() const {
    if (!(lambda_aux >= 0.0) || !(lambda_tcr >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "loss weights must be nonnegative");
    if (!(margin >= 0.0 && margin <= 1.0)) throw Error(ErrorCode::InvalidArgument, "margin must lie in [0, 1]");
    if (window < 1) throw Error(ErrorCode::BadWindow, "window must be positive");
    if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "sigma must be positive");
  }
};

// ---------------------------------------------------------------------------
// Cross-entropy terms
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label].
inline ag::Tensor cross_entropy(ag::Tape& tape, const ag::Tensor& logits, const std::vector<int>& labels) {
  require_shape(static_cast<std::size_t>(logits.rows()) == labels.size(),
                "cross_entropy has " + std::to_string(logits.rows()) + " rows but " + std::to_string(labels.size()) +
                    " labels");
  if (labels.empty()) throw Error(ErrorCode::EmptyEpisode, "cross_entropy over zero rows");
  Matrix onehot = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits.cols())
      throw Error(ErrorCode::LabelOutOfRange,
                  "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(logits.cols()) + ")");
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  const ag::Tensor picked = tape.sum(tape.mul(tape.log_softmax_rows(logits), tape.constant(std::move(onehot))));
  return tape.scale(picked, -1.0 / static_cast<Real>(labels.size()));
}

inline ag::Tensor episode_ce_loss(ag::Tape& tape, const ag::Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(tape, logits, labels);
}

inline Real episode_ce_loss(const Matrix& logits, const std::vector<int>& labels) {
  ag::Tape tape = ag::Tape::no_grad();
  return cross_entropy(tape, tape.constant(logits), labels).item();
}

/// Cross-entropy of the auxiliary head applied to temporally pooled enhanced
/// features, one row per video with a known global label.
inline ag::Tensor aux_semantic_loss(ag::Tape& tape, const std::vector<ag::Tensor>& pooled,
                                    const std::vector<int>& global_labels, const RelationModelParams& params) {
  require_shape(pooled.size() == global_labels.size(), "aux loss needs one label per pooled feature");
  const ag::Tensor x = tape.concat_rows(pooled);
  const ag::Tensor logits =
      tape.add(tape.matmul(x, params.aux_weight), tape.broadcast_row(params.aux_bias, x.rows()));
  return cross_entropy(tape, logits, global_labels);
}

// ---------------------------------------------------------------------------
// Temporal coherence
// ---------------------------------------------------------------------------

/// Gaussian-ramped margin for a frame gap beyond the window:
/// 1 - exp(-(gap - window)^2 / (2 sigma^2)).
inline Real smooth_margin(int gap, int window, Real sigma) {
  const Real excess = static_cast<Real>(gap - window);
  return 1.0 - std::exp(-(excess * excess) / (2.0 * sigma * sigma));
}

inline Real inverse_difference_weight(int gap) { return 1.0 / (static_cast<Real>(gap) * gap + 1.0); }

// Constant per-pair coefficients of a regularizer over ordered frame pairs:
// sum_ab attract(a,b) d_ab + repel_mask(a,b) max(0, margin(a,b) - d_ab).
struct CoherencePlan {
  Matrix attract;
  Matrix repel_mask;
  Matrix margin;
  bool has_repel = false;
};

inline CoherencePlan coherence_plan(CoherenceKind kind, Eigen::Index frames, const LossWeights& w) {
  if (frames < 2) throw Error(ErrorCode::TooShort, "coherence needs at least 2 frames, got " + std::to_string(frames));
  CoherencePlan plan{Matrix::Zero(frames, frames), Matrix::Zero(frames, frames), Matrix::Zero(frames, frames), false};
  if (kind == CoherenceKind::SmoothTCR) {
    if (w.window < 1 || w.window >= frames)
      throw Error(ErrorCode::BadWindow, "window " + std::to_string(w.window) + " must lie in [1, " +
                                            std::to_string(frames) + ")");
    if (!(w.sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "sigma must be positive");
  }
  for (Eigen::Index a = 0; a < frames; ++a)
    for (Eigen::Index b = 0; b < frames; ++b) {
      const int gap = static_cast<int>(a > b ? a - b : b - a);
      switch (kind) {
        case CoherenceKind::IDM:
          plan.attract(a, b) = inverse_difference_weight(gap);
          break;
        case CoherenceKind::HardMargin:
          if (gap == 1) {
            plan.attract(a, b) = 1.0;
          } else if (gap > 1) {
            plan.repel_mask(a, b) = 1.0;
            plan.margin(a, b) = w.margin;
          }
          break;
        case CoherenceKind::SmoothTCR:
          if (gap == 0) break;
          if (gap <= w.window) {
            plan.attract(a, b) = inverse_difference_weight(gap);
          } else {
            plan.repel_mask(a, b) = 1.0;
            plan.margin(a, b) = smooth_margin(gap, w.window, w.sigma);
          }
          break;
      }
    }
  plan.has_repel = plan.repel_mask.any();
  return plan;
}

inline ag::Tensor coherence_regularizer(ag::Tape& tape, const ag::Tensor& f, CoherenceKind kind, const LossWeights& w) {
  const CoherencePlan plan = coherence_plan(kind, f.rows(), w);
  const ag::Tensor d = frame_distances_on_tape(tape, f, f);
  ag::Tensor total = tape.sum(tape.mul(d, tape.constant(plan.attract)));
  if (plan.has_repel) {
    const ag::Tensor hinge = tape.relu(tape.sub(tape.constant(plan.margin), d));
    total = tape.add(total, tape.sum(tape.mul(hinge, tape.constant(plan.repel_mask))));
  }
  return total;
}

inline Real coherence_value(const Matrix& f, CoherenceKind kind, const LossWeights& w) {
  ag::Tape tape = ag::Tape::no_grad();
  return coherence_regularizer(tape, tape.constant(f), kind, w).item();
}

inline Real idm_regularizer(const Matrix& f) { return coherence_value(f, CoherenceKind::IDM, LossWeights{}); }

inline Real hard_margin_regularizer(const Matrix& f, Real margin) {
  LossWeights w;
  w.margin = margin;
  return coherence_value(f, CoherenceKind::HardMargin, w);
}

inline Real smooth_tcr_regularizer(const Matrix& f, int window, Real sigma) {
  LossWeights w;
  w.window = window;
  w.sigma = sigma;
  return coherence_value(f, CoherenceKind::SmoothTCR, w);
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

struct LossTerms {
  ag::Tensor total;
  Real ce = 0.0;
  Real aux = 0.0;
  Real tcr = 0.0;
};

/// total = ce + lambda_aux * aux + lambda_tcr * mean_i coherence(f~_i).
/// aux covers support and query videos with a known global label; coherence
/// covers every embedded video. `coherence` empty disables the regularizer.
inline LossTerms total_loss(ag::Tape& tape, const Episode& e, const EpisodeEmbeddings& emb, const ag::Tensor& logits,
                            const LossWeights& w, std::optional<CoherenceKind> coherence,
                            const RelationModelParams& params) {
  w.validate();
  std::vector<int> query_labels;
  for (const auto& q : e.query) query_labels.push_back(q.label);
  LossTerms out;
  out.total = episode_ce_loss(tape, logits, query_labels);
  out.ce = out.total.item();

  std::vector<ag::Tensor> aux_inputs;
  std::vector<int> aux_labels;
  auto collect = [&](const std::vector<EpisodeItem>& items, const std::vector<ag::Tensor>& feats) {
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].global_label != kUnknownLabel) {
        aux_inputs.push_back(tape.global_avg_pool_rows(feats[i]));
        aux_labels.push_back(items[i].global_label);
      }
  };
  collect(e.support, emb.support_enhanced);
  collect(e.query, emb.query_enhanced);
  if (!aux_inputs.empty()) {
    const ag::Tensor aux = aux_semantic_loss(tape, aux_inputs, aux_labels, params);
    out.aux = aux.item();
    out.total = tape.add(out.total, tape.scale(aux, w.lambda_aux));
  }

  if (coherence) {
    const auto videos = emb.all_enhanced();
    ag::Tensor acc;
    for (std::size_t i = 0; i < videos.size(); ++i) {
      const ag::Tensor r = coherence_regularizer(tape, videos[i], *coherence, w);
      acc = i == 0 ? r : tape.add(acc, r);
    }
    const ag::Tensor mean = tape.scale(acc, 1.0 / static_cast<Real>(videos.size()));
    out.tcr = mean.item();
    out.total = tape.add(out.total, tape.scale(mean, w.lambda_tcr));
  }
  return out;
}

}  // namespace hyrsm
