#pragma once

// Hybrid relation module: per-video temporal self-attention (intra), episode-wide
// correlation-weighted enhancement (inter) and expand-concatenate-project
// aggregation, producing task-specific frame features for every video.

#include "hyrsm/autograd.hpp"
#include "hyrsm/core.hpp"
#include "hyrsm/io.hpp"
#include "hyrsm/metric.hpp"

#include <functional>

namespace hyrsm {

// How correlation scores between pooled videos are turned into weights.
enum class KappaMode {
  Sigmoid,     // independent gates in (0, 1), rows not normalized
  RowSoftmax,  // each row sums to 1
};

// Which videos may lend information in the inter-relation step.
enum class PoolMode {
  SupportAndQuery,
  SupportOnly,
};

struct RelationConfig {
  int channels = 64;
  int heads = 2;
  int max_frames = 8;
  int corr_dim = 64;
  int global_classes = 1;
  KappaMode kappa = KappaMode::Sigmoid;
  PoolMode pool = PoolMode::SupportAndQuery;
  bool positional = true;
  bool use_intra = true;
  bool use_inter = true;

  void validate() const {
    if (channels < 1 || heads < 1 || max_frames < 1 || corr_dim < 1 || global_classes < 1)
      throw Error(ErrorCode::InvalidArgument, "relation config sizes must be positive");
    if (channels % heads != 0)
      throw Error(ErrorCode::InvalidArgument,
                  "head count " + std::to_string(heads) + " does not divide " + std::to_string(channels));
  }
};

struct AttentionHead {
  ag::Tensor query, key, value;  // C x C/h each
};

/// All learnable weights. Tensor members are shared handles: copying this struct
/// aliases the weights, clone() makes an independent copy.
struct RelationModelParams {
  RelationConfig config;

  std::vector<AttentionHead> heads;
  ag::Tensor attn_out;    // C x C
  ag::Tensor norm_gain;   // 1 x C
  ag::Tensor norm_bias;   // 1 x C
  ag::Tensor positional;  // max_frames x C

  ag::Tensor corr_left;         // C x Ck
  ag::Tensor corr_right;        // C x Ck
  ag::Tensor corr_temperature;  // 1 x 1

  ag::Tensor fuse_weight;  // 2C x C
  ag::Tensor fuse_bias;    // 1 x C

  ag::Tensor aux_weight;  // C x G
  ag::Tensor aux_bias;    // 1 x G

  // Stable order; used by the optimizer and the checkpoint writer.
  std::vector<std::pair<std::string, ag::Tensor>> named() const {
    std::vector<std::pair<std::string, ag::Tensor>> out;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string prefix = "intra.head" + std::to_string(h) + ".";
      out.emplace_back(prefix + "query", heads[h].query);
      out.emplace_back(prefix + "key", heads[h].key);
      out.emplace_back(prefix + "value", heads[h].value);
    }
    out.emplace_back("intra.out", attn_out);
    out.emplace_back("intra.norm_gain", norm_gain);
    out.emplace_back("intra.norm_bias", norm_bias);
    out.emplace_back("intra.positional", positional);
    out.emplace_back("inter.left", corr_left);
    out.emplace_back("inter.right", corr_right);
    out.emplace_back("inter.temperature", corr_temperature);
    out.emplace_back("fuse.weight", fuse_weight);
    out.emplace_back("fuse.bias", fuse_bias);
    out.emplace_back("aux.weight", aux_weight);
    out.emplace_back("aux.bias", aux_bias);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += static_cast<std::size_t>(t.value().size());
    return n;
  }

  RelationModelParams clone() const {
    RelationModelParams p;
    p.config = config;
    for (const auto& h : heads) p.heads.push_back({h.query.clone(), h.key.clone(), h.value.clone()});
    p.attn_out = attn_out.clone();
    p.norm_gain = norm_gain.clone();
    p.norm_bias = norm_bias.clone();
    p.positional = positional.clone();
    p.corr_left = corr_left.clone();
    p.corr_right = corr_right.clone();
    p.corr_temperature = corr_temperature.clone();
    p.fuse_weight = fuse_weight.clone();
    p.fuse_bias = fuse_bias.clone();
    p.aux_weight = aux_weight.clone();
    p.aux_bias = aux_bias.clone();
    return p;
  }

  void zero_grad() {
    for (auto& [name, t] : named()) t.zero_grad();
  }

  // Every weight zero except the layer-norm gain (ones): the intra path is the
  // identity and the correlation scores are all zero.
  static RelationModelParams zeros(const RelationConfig& cfg) {
    cfg.validate();
    const int c = cfg.channels, dh = cfg.channels / cfg.heads;
    auto param = [](Eigen::Index r, Eigen::Index k) { return ag::Tensor::leaf(Matrix::Zero(r, k), true); };
    RelationModelParams p;
    p.config = cfg;
    for (int h = 0; h < cfg.heads; ++h) p.heads.push_back({param(c, dh), param(c, dh), param(c, dh)});
    p.attn_out = param(c, c);
    p.norm_gain = ag::Tensor::leaf(Matrix::Ones(1, c), true);
    p.norm_bias = param(1, c);
    p.positional = param(cfg.max_frames, c);
    p.corr_left = param(c, cfg.corr_dim);
    p.corr_right = param(c, cfg.corr_dim);
    p.corr_temperature = param(1, 1);
    p.fuse_weight = param(2 * c, c);
    p.fuse_bias = param(1, c);
    p.aux_weight = param(c, cfg.global_classes);
    p.aux_bias = param(1, cfg.global_classes);
    return p;
  }

  // Fan-in scaled uniform for attention, correlation and fuse weights; zeros for
  // the positional table and the auxiliary head.
  static RelationModelParams initialize(const RelationConfig& cfg, Rng& rng) {
    RelationModelParams p = zeros(cfg);
    auto fill = [&rng](ag::Tensor& t, Real fan_in) {
      const Real bound = 1.0 / std::sqrt(fan_in);
      Matrix& m = t.mutable_value();
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    };
    const Real c = cfg.channels;
    for (auto& h : p.heads) {
      fill(h.query, c);
      fill(h.key, c);
      fill(h.value, c);
    }
    fill(p.attn_out, c);
    fill(p.corr_left, c);
    fill(p.corr_right, c);
    p.corr_temperature.mutable_value()(0, 0) = 1.0 / std::sqrt(static_cast<Real>(cfg.corr_dim));
    fill(p.fuse_weight, 2.0 * c);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Intra-relation
// ---------------------------------------------------------------------------

/// out = z + MSA(LN(z)), z = f + positional[0:T]. When `attention` is given it
/// receives each head's T x T row-stochastic attention matrix.
inline ag::Tensor intra_relation(ag::Tape& tape, const ag::Tensor& f, const RelationModelParams& params,
                                 std::vector<Matrix>* attention = nullptr) {
  const auto& cfg = params.config;
  require_shape(f.cols() == cfg.channels, "intra_relation expects " + std::to_string(cfg.channels) +
                                              " channels, got " + std::to_string(f.cols()));
  const Eigen::Index t = f.rows();
  if (cfg.positional && t > cfg.max_frames)
    throw Error(ErrorCode::ShapeMismatch, "sequence of " + std::to_string(t) + " frames exceeds positional table of " +
                                              std::to_string(cfg.max_frames));
  const ag::Tensor z = cfg.positional ? tape.add(f, tape.slice_rows(params.positional, 0, t)) : f;
  const ag::Tensor normed = tape.layer_norm(z, params.norm_gain, params.norm_bias);
  const Real inv_sqrt_dh = 1.0 / std::sqrt(static_cast<Real>(cfg.channels / cfg.heads));

  std::vector<ag::Tensor> outputs;
  outputs.reserve(params.heads.size());
  if (attention) attention->clear();
  for (const auto& head : params.heads) {
    const ag::Tensor q = tape.matmul(normed, head.query);
    const ag::Tensor k = tape.matmul(normed, head.key);
    const ag::Tensor v = tape.matmul(normed, head.value);
    const ag::Tensor weights = tape.row_softmax(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_dh));
    if (attention) attention->push_back(weights.value());
    outputs.push_back(tape.matmul(weights, v));
  }
  return tape.add(z, tape.matmul(tape.concat_cols(outputs), params.attn_out));
}

// ---------------------------------------------------------------------------
// Inter-relation
// ---------------------------------------------------------------------------

struct InterRelation {
  std::vector<ag::Tensor> enhanced;  // 1 x C per video
  std::vector<ag::Tensor> pooled;    // 1 x C per video
  ag::Tensor correlation;            // videos x pool weights
};

/// f_i^e = sum_j kappa(psi(f_i), psi(f_j)) psi(f_j) over the first `pool_count`
/// videos (all of them when pool_count is 0). kappa is the temperature-scaled dot
/// product of projected pooled features, gated by a sigmoid or row softmax.
inline InterRelation inter_relation(ag::Tape& tape, const std::vector<ag::Tensor>& feats,
                                    const RelationModelParams& params, std::size_t pool_count = 0) {
  if (feats.empty()) throw Error(ErrorCode::EmptyEpisode, "inter_relation over zero videos");
  if (pool_count == 0 || pool_count > feats.size()) pool_count = feats.size();
  for (const auto& f : feats)
    require_shape(f.rows() == feats.front().rows() && f.cols() == feats.front().cols(),
                  "inter_relation videos must share a shape");

  InterRelation out;
  out.pooled.reserve(feats.size());
  for (const auto& f : feats) out.pooled.push_back(tape.global_avg_pool_rows(f));
  const ag::Tensor all = tape.concat_rows(out.pooled);
  const ag::Tensor pool = pool_count == feats.size() ? all : tape.slice_rows(all, 0, static_cast<Eigen::Index>(pool_count));

  const ag::Tensor left = tape.matmul(all, params.corr_left);
  const ag::Tensor right = tape.matmul(pool, params.corr_right);
  const ag::Tensor scores = tape.scale_by(tape.matmul(left, tape.transpose(right)), params.corr_temperature);
  out.correlation =
      params.config.kappa == KappaMode::RowSoftmax ? tape.row_softmax(scores) : tape.sigmoid(scores);
  const ag::Tensor mixed = tape.matmul(out.correlation, pool);
  out.enhanced.reserve(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i)
    out.enhanced.push_back(tape.slice_rows(mixed, static_cast<Eigen::Index>(i), 1));
  return out;
}

/// Expand f_e to T rows, concatenate with f_a along channels and project
/// 2C -> C: out = [f_a | 1 f_e] W + 1 b.
inline ag::Tensor aggregate(ag::Tape& tape, const ag::Tensor& f_a, const ag::Tensor& f_e,
                            const RelationModelParams& params) {
  require_shape(f_e.rows() == 1 && f_e.cols() == f_a.cols(),
                "aggregate expects a 1x" + std::to_string(f_a.cols()) + " episode feature");
  require_shape(params.fuse_weight.rows() == 2 * f_a.cols(), "fuse weight does not match channel count");
  const Eigen::Index t = f_a.rows();
  const ag::Tensor stacked = tape.concat_cols(f_a, tape.broadcast_row(f_e, t));
  return tape.add(tape.matmul(stacked, params.fuse_weight), tape.broadcast_row(params.fuse_bias, t));
}

// ---------------------------------------------------------------------------
// Whole-episode forward pass
// ---------------------------------------------------------------------------

struct VideoEmbeddings {
  std::vector<ag::Tensor> enhanced;  // T x C per video
  std::vector<ag::Tensor> pooled;    // psi(f^a), 1 x C per video
  ag::Tensor correlation;            // undefined when the inter path is disabled
};

/// Runs the relation module over `videos`; the first `pool_count` of them form
/// the inter-relation pool (0 means every video).
inline VideoEmbeddings embed_videos(ag::Tape& tape, const std::vector<const Matrix*>& videos,
                                    const RelationModelParams& params, std::size_t pool_count = 0) {
  if (videos.empty()) throw Error(ErrorCode::EmptyEpisode, "no videos to embed");
  std::vector<ag::Tensor> intra;
  intra.reserve(videos.size());
  for (const Matrix* v : videos) {
    const ag::Tensor f = tape.constant(*v);
    intra.push_back(params.config.use_intra ? intra_relation(tape, f, params) : f);
  }
  VideoEmbeddings out;
  if (!params.config.use_inter) {
    for (const auto& f : intra) out.pooled.push_back(tape.global_avg_pool_rows(f));
    out.enhanced = std::move(intra);
    return out;
  }
  InterRelation inter = inter_relation(tape, intra, params, pool_count);
  out.enhanced.reserve(intra.size());
  for (std::size_t i = 0; i < intra.size(); ++i) out.enhanced.push_back(aggregate(tape, intra[i], inter.enhanced[i], params));
  out.pooled = std::move(inter.pooled);
  out.correlation = inter.correlation;
  return out;
}

struct EpisodeEmbeddings {
  std::vector<ag::Tensor> support_enhanced;
  std::vector<ag::Tensor> pseudo_enhanced;
  std::vector<ag::Tensor> query_enhanced;
  std::vector<ag::Tensor> pooled;  // support, pseudo-support, query order
  ag::Tensor correlation;

  std::vector<ag::Tensor> all_enhanced() const {
    std::vector<ag::Tensor> out = support_enhanced;
    out.insert(out.end(), pseudo_enhanced.begin(), pseudo_enhanced.end());
    out.insert(out.end(), query_enhanced.begin(), query_enhanced.end());
    return out;
  }
};

/// Embeds support, pseudo-support and query videos jointly. Queries join the
/// inter-relation pool unless the config selects PoolMode::SupportOnly.
inline EpisodeEmbeddings forward_episode(ag::Tape& tape, const Episode& e, const RelationModelParams& params) {
  validate_episode(e);
  std::vector<const Matrix*> videos;
  for (const auto& it : e.support) videos.push_back(&it.sequence.frames);
  for (const auto& it : e.pseudo_support) videos.push_back(&it.sequence.frames);
  const std::size_t labeled = videos.size();
  for (const auto& it : e.query) videos.push_back(&it.sequence.frames);
  const std::size_t pool = params.config.pool == PoolMode::SupportOnly ? labeled : 0;

  VideoEmbeddings v = embed_videos(tape, videos, params, pool);
  EpisodeEmbeddings out;
  const auto ns = e.support.size(), np = e.pseudo_support.size();
  out.support_enhanced.assign(v.enhanced.begin(), v.enhanced.begin() + static_cast<std::ptrdiff_t>(ns));
  out.pseudo_enhanced.assign(v.enhanced.begin() + static_cast<std::ptrdiff_t>(ns),
                             v.enhanced.begin() + static_cast<std::ptrdiff_t>(ns + np));
  out.query_enhanced.assign(v.enhanced.begin() + static_cast<std::ptrdiff_t>(ns + np), v.enhanced.end());
  out.pooled = std::move(v.pooled);
  out.correlation = v.correlation;
  return out;
}

inline std::vector<int> support_labels_with_pseudo(const Episode& e) {
  std::vector<int> labels;
  for (const auto& it : e.support) labels.push_back(it.label);
  for (const auto& it : e.pseudo_support) labels.push_back(it.label);
  return labels;
}

/// |Q| x N matrix of negative distances between each query and each class
/// prototype (frame-wise mean of the class's support and pseudo-support).
inline Matrix episode_logits(const EpisodeEmbeddings& emb, const Episode& e, MetricKind kind) {
  std::vector<Matrix> support;
  for (const auto& t : emb.support_enhanced) support.push_back(t.value());
  for (const auto& t : emb.pseudo_enhanced) support.push_back(t.value());
  std::vector<Matrix> queries;
  for (const auto& t : emb.query_enhanced) queries.push_back(t.value());
  return logits_from_features(support, support_labels_with_pseudo(e), queries, e.n_way, kind);
}

inline ag::Tensor episode_logits_on_tape(ag::Tape& tape, const EpisodeEmbeddings& emb, const Episode& e,
                                         MetricKind kind) {
  std::vector<ag::Tensor> support = emb.support_enhanced;
  support.insert(support.end(), emb.pseudo_enhanced.begin(), emb.pseudo_enhanced.end());
  return logits_on_tape(tape, support, support_labels_with_pseudo(e), emb.query_enhanced, e.n_way, kind);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "HYRS" | u16 version | repeated until EOF:
//     u16 name length | name bytes | u32 rows | u32 cols | rows*cols f32 (row-major)
//   all integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;


inline std::vector<std::pair<std::string, Matrix>> checkpoint_records(const RelationModelParams& p) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (const auto& [name, t] : p.named()) out.emplace_back(name, t.value());
  auto flag = [&out](const char* name, Real v) { out.emplace_back(name, Matrix::Constant(1, 1, v)); };
  flag("config.kappa_softmax", p.config.kappa == KappaMode::RowSoftmax ? 1.0 : 0.0);
  flag("config.support_only", p.config.pool == PoolMode::SupportOnly ? 1.0 : 0.0);
  flag("config.positional", p.config.positional ? 1.0 : 0.0);
  flag("config.use_intra", p.config.use_intra ? 1.0 : 0.0);
  flag("config.use_inter", p.config.use_inter ? 1.0 : 0.0);
  return out;
}

inline std::string checkpoint_bytes(const RelationModelParams& p) {
  std::string out = "HYRS";
  detail::put_le(out, kCheckpointVersion, 2);
  for (const auto& [name, m] : checkpoint_records(p)) {
    detail::put_le(out, name.size(), 2);
    out += name;
    detail::put_le(out, static_cast<std::uint64_t>(m.rows()), 4);
    detail::put_le(out, static_cast<std::uint64_t>(m.cols()), 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, static_cast<float>(m.data()[i]));
  }
  return out;
}

inline RelationModelParams parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "HYRS") != 0) throw Error(ErrorCode::BadMagic, "not a HYRS checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get_le(bytes, pos, 2);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::UnsupportedDtype, "checkpoint version " + std::to_string(version));
  std::map<std::string, Matrix> records;
  while (pos < bytes.size()) {
    const auto len = static_cast<std::size_t>(detail::get_le(bytes, pos, 2));
    if (pos + len > bytes.size()) throw Error(ErrorCode::TruncatedFile, "record name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto rows = static_cast<Eigen::Index>(detail::get_le(bytes, pos, 4));
    const auto cols = static_cast<Eigen::Index>(detail::get_le(bytes, pos, 4));
    if (pos + static_cast<std::size_t>(rows * cols) * 4 > bytes.size())
      throw Error(ErrorCode::TruncatedFile, "payload of '" + name + "'");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_f32(bytes, pos);
    records[std::move(name)] = std::move(m);
  }
  auto take = [&records](const std::string& name) -> Matrix& {
    auto it = records.find(name);
    if (it == records.end()) throw Error(ErrorCode::TruncatedFile, "checkpoint lacks '" + name + "'");
    return it->second;
  };
  auto flag = [&](const std::string& name) { return take(name)(0, 0) != 0.0; };

  RelationConfig cfg;
  const Matrix& gain = take("intra.norm_gain");
  cfg.channels = static_cast<int>(gain.cols());
  int heads = 0;
  while (records.count("intra.head" + std::to_string(heads) + ".query")) ++heads;
  cfg.heads = heads;
  cfg.max_frames = static_cast<int>(take("intra.positional").rows());
  cfg.corr_dim = static_cast<int>(take("inter.left").cols());
  cfg.global_classes = static_cast<int>(take("aux.weight").cols());
  cfg.kappa = flag("config.kappa_softmax") ? KappaMode::RowSoftmax : KappaMode::Sigmoid;
  cfg.pool = flag("config.support_only") ? PoolMode::SupportOnly : PoolMode::SupportAndQuery;
  cfg.positional = flag("config.positional");
  cfg.use_intra = flag("config.use_intra");
  cfg.use_inter = flag("config.use_inter");

  RelationModelParams p = RelationModelParams::zeros(cfg);
  for (auto& [name, t] : p.named()) {
    const Matrix& m = take(name);
    require_shape(m.rows() == t.rows() && m.cols() == t.cols(),
                  "checkpoint record '" + name + "' is " + shape_str(m) + ", expected " + shape_str(t.value()));
    t.mutable_value() = m;
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const RelationModelParams& p) {
  detail::write_file(path, checkpoint_bytes(p));
}

inline RelationModelParams load_checkpoint(const std::string& path) {
  return parse_checkpoint(detail::read_file(path));
}

}  // namespace hyrsm
