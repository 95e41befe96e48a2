#pragma once

// Straight-line reference implementations for tests. Nothing here calls the
// library's kernels or the gradient engine: every quantity is rebuilt from
// scalar loops over std::vector so a shared bug cannot hide on both sides.

#include "hyrsm/hyrsm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const hyrsm::Matrix& m) {
  Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  return g;
}

inline hyrsm::Matrix to_matrix(const Grid& g) {
  hyrsm::Matrix m(static_cast<Eigen::Index>(g.size()), g.empty() ? 0 : static_cast<Eigen::Index>(g[0].size()));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[i][j];
  return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  const double denom = std::max(std::sqrt(dot(a, a)) * std::sqrt(dot(b, b)), 1e-8);
  return 1.0 - dot(a, b) / denom;
}

inline Grid distances(const Grid& x, const Grid& y) {
  Grid d(x.size(), std::vector<double>(y.size()));
  for (std::size_t a = 0; a < x.size(); ++a)
    for (std::size_t b = 0; b < y.size(); ++b) d[a][b] = cosine_distance(x[a], y[b]);
  return d;
}

inline std::vector<double> row_mins(const Grid& d) {
  std::vector<double> out;
  for (const auto& row : d) out.push_back(*std::min_element(row.begin(), row.end()));
  return out;
}

inline std::vector<double> col_mins(const Grid& d) {
  std::vector<double> out(d[0].size(), std::numeric_limits<double>::infinity());
  for (const auto& row : d)
    for (std::size_t b = 0; b < row.size(); ++b) out[b] = std::min(out[b], row[b]);
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double max_of(const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); }

inline double dtw(const Grid& d) {
  const std::size_t n = d.size(), m = d[0].size();
  const double inf = std::numeric_limits<double>::infinity();
  Grid acc(n + 1, std::vector<double>(m + 1, inf));
  acc[0][0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      acc[i][j] = d[i - 1][j - 1] + std::min({acc[i - 1][j - 1], acc[i - 1][j], acc[i][j - 1]});
  return acc[n][m] / static_cast<double>(n + m);
}

inline double metric(const Grid& d, hyrsm::MetricKind kind) {
  using K = hyrsm::MetricKind;
  switch (kind) {
    case K::Hausdorff: return max_of(row_mins(d));
    case K::HausdorffBidirectional: return std::max(max_of(row_mins(d)), max_of(col_mins(d)));
    case K::ModifiedHausdorffDirected: return mean(row_mins(d));
    case K::BiMHM: return mean(row_mins(d)) + mean(col_mins(d));
    case K::Diagonal: {
      double s = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) s += d[i][i];
      return s / static_cast<double>(d.size());
    }
    case K::PlainDTW: return dtw(d);
  }
  return std::numeric_limits<double>::quiet_NaN();
}

// --- temporal coherence -------------------------------------------------------

inline double idm(const Grid& f) {
  double s = 0.0;
  for (std::size_t a = 0; a < f.size(); ++a)
    for (std::size_t b = 0; b < f.size(); ++b) {
      const double gap = static_cast<double>(a) - static_cast<double>(b);
      s += cosine_distance(f[a], f[b]) / (gap * gap + 1.0);
    }
  return s;
}

inline double hard_margin(const Grid& f, double margin) {
  double s = 0.0;
  for (std::size_t a = 0; a < f.size(); ++a)
    for (std::size_t b = 0; b < f.size(); ++b) {
      const std::size_t gap = a > b ? a - b : b - a;
      const double d = cosine_distance(f[a], f[b]);
      if (gap == 1) s += d;
      if (gap > 1) s += std::max(0.0, margin - d);
    }
  return s;
}

inline double smooth_tcr(const Grid& f, int window, double sigma) {
  double s = 0.0;
  for (std::size_t a = 0; a < f.size(); ++a)
    for (std::size_t b = 0; b < f.size(); ++b) {
      if (a == b) continue;
      const int gap = static_cast<int>(a > b ? a - b : b - a);
      const double d = cosine_distance(f[a], f[b]);
      if (gap <= window) {
        s += d / (static_cast<double>(gap) * gap + 1.0);
      } else {
        const double x = gap - window;
        s += std::max(0.0, 1.0 - std::exp(-x * x / (2.0 * sigma * sigma)) - d);
      }
    }
  return s;
}

// --- relation module -----------------------------------------------------------

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e;
  double s = 0.0;
  for (double v : x) e.push_back(std::exp(v - m)), s += e.back();
  for (double& v : e) v /= s;
  return e;
}

inline std::vector<double> column_mean(const Grid& f) {
  std::vector<double> out(f[0].size(), 0.0);
  for (const auto& row : f)
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c] / static_cast<double>(f.size());
  return out;
}

// z = f + pos; out = z + concat_h(softmax(q k^T / sqrt(dh)) v) W_o with
// q, k, v projections of layer-normed z. Attention matrices go to `attn`.
inline Grid intra(const Grid& f, const hyrsm::RelationModelParams& p, std::vector<Grid>* attn = nullptr) {
  const std::size_t t = f.size(), c = f[0].size();
  Grid z = f;
  if (p.config.positional) {
    const Grid pos = to_grid(p.positional.value());
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) z[i][j] += pos[i][j];
  }
  const auto gain = to_grid(p.norm_gain.value())[0];
  const auto bias = to_grid(p.norm_bias.value())[0];
  Grid n(t, std::vector<double>(c));
  for (std::size_t i = 0; i < t; ++i) {
    double mu = 0.0, var = 0.0;
    for (double v : z[i]) mu += v;
    mu /= static_cast<double>(c);
    for (double v : z[i]) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) n[i][j] = (z[i][j] - mu) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
  }
  Grid concat(t);
  const double dh = static_cast<double>(c / p.heads.size());
  for (const auto& h : p.heads) {
    const Grid q = matmul(n, to_grid(h.query.value()));
    const Grid k = matmul(n, to_grid(h.key.value()));
    const Grid v = matmul(n, to_grid(h.value.value()));
    Grid w(t);
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> scores;
      for (std::size_t j = 0; j < t; ++j) scores.push_back(dot(q[i], k[j]) / std::sqrt(dh));
      w[i] = softmax(scores);
    }
    if (attn) attn->push_back(w);
    const Grid o = matmul(w, v);
    for (std::size_t i = 0; i < t; ++i) concat[i].insert(concat[i].end(), o[i].begin(), o[i].end());
  }
  const Grid proj = matmul(concat, to_grid(p.attn_out.value()));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) z[i][j] += proj[i][j];
  return z;
}

struct InterOut {
  std::vector<std::vector<double>> enhanced;
  Grid kappa;
};

// f_i^e = sum_j kappa_ij psi(f_j) over the first `pool` videos.
inline InterOut inter(const std::vector<Grid>& feats, const hyrsm::RelationModelParams& p, std::size_t pool = 0) {
  if (pool == 0) pool = feats.size();
  std::vector<std::vector<double>> pooled;
  for (const auto& f : feats) pooled.push_back(column_mean(f));
  const Grid wl = to_grid(p.corr_left.value()), wr = to_grid(p.corr_right.value());
  const double temp = p.corr_temperature.value()(0, 0);
  auto project = [](const std::vector<double>& x, const Grid& w) {
    std::vector<double> out(w[0].size(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k)
      for (std::size_t j = 0; j < w[0].size(); ++j) out[j] += x[k] * w[k][j];
    return out;
  };
  InterOut out;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    std::vector<double> scores;
    for (std::size_t j = 0; j < pool; ++j) scores.push_back(temp * dot(project(pooled[i], wl), project(pooled[j], wr)));
    std::vector<double> kappa;
    if (p.config.kappa == hyrsm::KappaMode::RowSoftmax)
      kappa = softmax(scores);
    else
      for (double s : scores) kappa.push_back(1.0 / (1.0 + std::exp(-s)));
    std::vector<double> e(pooled[i].size(), 0.0);
    for (std::size_t j = 0; j < pool; ++j)
      for (std::size_t c = 0; c < e.size(); ++c) e[c] += kappa[j] * pooled[j][c];
    out.enhanced.push_back(e);
    out.kappa.push_back(kappa);
  }
  return out;
}

inline Grid aggregate(const Grid& fa, const std::vector<double>& fe, const hyrsm::RelationModelParams& p) {
  const Grid w = to_grid(p.fuse_weight.value());
  const auto b = to_grid(p.fuse_bias.value())[0];
  Grid out;
  for (const auto& row : fa) {
    std::vector<double> x = row;
    x.insert(x.end(), fe.begin(), fe.end());
    std::vector<double> y = b;
    for (std::size_t k = 0; k < x.size(); ++k)
      for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[k] * w[k][j];
    out.push_back(y);
  }
  return out;
}

// Enhanced features of every video in list order (support, pseudo, query).
inline std::vector<Grid> embed(const std::vector<Grid>& videos, const hyrsm::RelationModelParams& p, std::size_t pool = 0) {
  std::vector<Grid> a;
  for (const auto& v : videos) a.push_back(p.config.use_intra ? intra(v, p) : v);
  if (!p.config.use_inter) return a;
  const InterOut e = inter(a, p, pool);
  std::vector<Grid> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(aggregate(a[i], e.enhanced[i], p));
  return out;
}

inline Grid prototype(const std::vector<Grid>& members) {
  Grid out = members[0];
  for (std::size_t m = 1; m < members.size(); ++m)
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] += members[m][i][j];
  for (auto& row : out)
    for (double& v : row) v /= static_cast<double>(members.size());
  return out;
}

// Negative distances from each query to each class prototype.
inline Grid logits(const std::vector<Grid>& support, const std::vector<int>& labels, const std::vector<Grid>& queries,
                   int n_way, hyrsm::MetricKind kind) {
  Grid out(queries.size(), std::vector<double>(static_cast<std::size_t>(n_way)));
  for (int c = 0; c < n_way; ++c) {
    std::vector<Grid> members;
    for (std::size_t i = 0; i < support.size(); ++i)
      if (labels[i] == c) members.push_back(support[i]);
    const Grid proto = prototype(members);
    for (std::size_t q = 0; q < queries.size(); ++q) out[q][static_cast<std::size_t>(c)] = -metric(distances(proto, queries[q]), kind);
  }
  return out;
}

inline double cross_entropy(const Grid& logits, const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t r = 0; r < logits.size(); ++r) s -= std::log(softmax(logits[r])[static_cast<std::size_t>(labels[r])]);
  return s / static_cast<double>(logits.size());
}

// Full episode objective rebuilt from the loops above.
inline double total_loss(const hyrsm::Episode& e, const hyrsm::RelationModelParams& p, hyrsm::MetricKind kind,
                         const hyrsm::LossWeights& w, std::optional<hyrsm::CoherenceKind> coherence) {
  std::vector<Grid> videos;
  std::vector<int> support_labels;
  for (const auto& it : e.support) videos.push_back(to_grid(it.sequence.frames)), support_labels.push_back(it.label);
  for (const auto& it : e.pseudo_support) videos.push_back(to_grid(it.sequence.frames)), support_labels.push_back(it.label);
  const std::size_t labeled = videos.size();
  for (const auto& it : e.query) videos.push_back(to_grid(it.sequence.frames));
  const std::size_t pool = p.config.pool == hyrsm::PoolMode::SupportOnly ? labeled : 0;
  const std::vector<Grid> emb = embed(videos, p, pool);
  const std::vector<Grid> sup(emb.begin(), emb.begin() + static_cast<std::ptrdiff_t>(labeled));
  const std::vector<Grid> qry(emb.begin() + static_cast<std::ptrdiff_t>(labeled), emb.end());
  std::vector<int> qlabels;
  for (const auto& it : e.query) qlabels.push_back(it.label);
  double total = cross_entropy(logits(sup, support_labels, qry, e.n_way, kind), qlabels);

  Grid aux_logits;
  std::vector<int> aux_labels;
  const Grid wa = to_grid(p.aux_weight.value());
  const auto ba = to_grid(p.aux_bias.value())[0];
  auto add_aux = [&](const Grid& f, int label) {
    const auto pooled = column_mean(f);
    std::vector<double> z = ba;
    for (std::size_t k = 0; k < pooled.size(); ++k)
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += pooled[k] * wa[k][j];
    aux_logits.push_back(z);
    aux_labels.push_back(label);
  };
  for (std::size_t i = 0; i < e.support.size(); ++i)
    if (e.support[i].global_label >= 0) add_aux(emb[i], e.support[i].global_label);
  for (std::size_t i = 0; i < e.query.size(); ++i)
    if (e.query[i].global_label >= 0) add_aux(emb[labeled + i], e.query[i].global_label);
  if (!aux_logits.empty()) total += w.lambda_aux * cross_entropy(aux_logits, aux_labels);

  if (coherence) {
    double s = 0.0;
    for (const auto& f : emb) {
      switch (*coherence) {
        case hyrsm::CoherenceKind::IDM: s += idm(f); break;
        case hyrsm::CoherenceKind::HardMargin: s += hard_margin(f, w.margin); break;
        case hyrsm::CoherenceKind::SmoothTCR: s += smooth_tcr(f, w.window, w.sigma); break;
      }
    }
    total += w.lambda_tcr * s / static_cast<double>(emb.size());
  }
  return total;
}

// --- misc ------------------------------------------------------------------------

inline hyrsm::Matrix random_matrix(hyrsm::Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  hyrsm::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Every parameter filled with small random values (layer-norm gain near 1).
inline hyrsm::RelationModelParams random_params(const hyrsm::RelationConfig& cfg, hyrsm::Rng& rng, double scale = 0.3) {
  auto p = hyrsm::RelationModelParams::zeros(cfg);
  for (auto& [name, t] : p.named()) {
    auto& m = t.mutable_value();
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += scale * rng.normal();
  }
  p.norm_gain.mutable_value().array() += 1.0;
  return p;
}

// Central differences of f with respect to every entry of `x`.
inline hyrsm::Matrix numeric_gradient(hyrsm::Matrix& x, const std::function<double()>& f, double h = 1e-6) {
  hyrsm::Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max |a - n| / max(floor, |a|, |n|) entrywise
inline double max_relative_error(const hyrsm::Matrix& analytic, const hyrsm::Matrix& numeric, double floor = 1e-2) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / std::max({floor, std::abs(a), std::abs(n)}));
  }
  return worst;
}

}  // namespace oracle
