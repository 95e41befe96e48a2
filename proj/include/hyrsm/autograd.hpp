#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every primitive whose inputs require gradients. backward()
// replays the records in reverse. Leaf gradients accumulate across calls and
// are only cleared by Tensor::zero_grad(); intermediate gradients are reset at
// the start of every backward() so a second call on the same tape adds the
// same contribution to every leaf again.

#include "hyrsm/core.hpp"

#include <atomic>
#include <functional>
#include <initializer_list>
#include <memory>

namespace hyrsm::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;
  std::uint64_t tape_id = 0;
  std::size_t tape_index = 0;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  Node& in(std::size_t i) { return *inputs[i]; }
};

/// Handle to a node. Copies share the node; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Matrix value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->value = std::move(value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Real item() const {
    if (rows() != 1 || cols() != 1) throw Error(ErrorCode::NotScalar, "item() on " + shape_str(value()));
    return node_->value(0, 0);
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && node_->grad.size() > 0; }

  // Gradient, or zeros of the value's shape when nothing has flowed in yet.
  Matrix grad() const {
    if (has_grad()) return node_->grad;
    return Matrix::Zero(rows(), cols());
  }
  void zero_grad() {
    if (node_) node_->grad.resize(0, 0);
  }

  Tensor clone() const { return leaf(node_->value, node_->requires_grad); }

  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

class Tape;
void backward(Tape& tape, const Tensor& loss);

class Tape {
 public:
  Tape() : id_(next_id()) {}

  // A tape that never records: forward values only, safe for concurrent use of
  // shared parameters.
  static Tape no_grad() {
    Tape t;
    t.recording_ = false;
    return t;
  }

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Tensor constant(Matrix m) const { return Tensor::leaf(std::move(m), false); }

  // ---- linear algebra ----------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_shape(a.cols() == b.rows(), "matmul " + shape_str(a.value()) + " * " + shape_str(b.value()));
    return record(a.value() * b.value(), {a, b}, [](Node& self) {
      const Matrix& g = self.grad;
      if (self.in(0).requires_grad) self.in(0).accumulate(g * self.in(1).value.transpose());
      if (self.in(1).requires_grad) self.in(1).accumulate(self.in(0).value.transpose() * g);
    });
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    return record(a.value() + b.value(), {a, b}, [](Node& self) {
      for (std::size_t i = 0; i < 2; ++i)
        if (self.in(i).requires_grad) self.in(i).accumulate(self.grad);
    });
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    return record(a.value() - b.value(), {a, b}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad);
      if (self.in(1).requires_grad) self.in(1).accumulate(-self.grad);
    });
  }

  // Elementwise product.
  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    return record(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.cwiseProduct(self.in(1).value));
      if (self.in(1).requires_grad) self.in(1).accumulate(self.grad.cwiseProduct(self.in(0).value));
    });
  }

  Tensor scale(const Tensor& a, Real s) {
    return record(a.value() * s, {a}, [s](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad * s);
    });
  }

  Tensor add_scalar(const Tensor& a, Real s) {
    return record(a.value().array() + s, {a}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad);
    });
  }

  // s * a with s a 1x1 tensor.
  Tensor scale_by(const Tensor& a, const Tensor& s) {
    require_shape(s.rows() == 1 && s.cols() == 1, "scale_by expects a 1x1 scale, got " + shape_str(s.value()));
    return record(a.value() * s.value()(0, 0), {a, s}, [](Node& self) {
      const Real sv = self.in(1).value(0, 0);
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad * sv);
      if (self.in(1).requires_grad) {
        Matrix gs(1, 1);
        gs(0, 0) = self.grad.cwiseProduct(self.in(0).value).sum();
        self.in(1).accumulate(gs);
      }
    });
  }

  Tensor transpose(const Tensor& a) {
    return record(a.value().transpose(), {a}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.transpose());
    });
  }

  // ---- nonlinearities ----------------------------------------------------

  Tensor row_softmax(const Tensor& a) {
    Matrix y = softmax_rows(a.value());
    return record(std::move(y), {a}, [](Node& self) {
      if (!self.in(0).requires_grad) return;
      const Matrix& y = self.value;
      const Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
      Matrix gx = y.cwiseProduct(self.grad);
      gx -= y.cwiseProduct(dots.replicate(1, y.cols()));
      self.in(0).accumulate(gx);
    });
  }

  Tensor log_softmax_rows(const Tensor& a) {
    const Matrix& x = a.value();
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Real m = x.row(r).maxCoeff();
      const Real lse = m + std::log((x.row(r).array() - m).exp().sum());
      y.row(r) = x.row(r).array() - lse;
    }
    return record(std::move(y), {a}, [](Node& self) {
      if (!self.in(0).requires_grad) return;
      const Matrix p = self.value.array().exp();
      const Eigen::VectorXd gsum = self.grad.rowwise().sum();
      self.in(0).accumulate(self.grad - p.cwiseProduct(gsum.replicate(1, p.cols())));
    });
  }

  Tensor relu(const Tensor& a) {
    return record(a.value().cwiseMax(0.0), {a}, [](Node& self) {
      if (!self.in(0).requires_grad) return;
      const Matrix mask = (self.in(0).value.array() > 0.0).cast<Real>();
      self.in(0).accumulate(self.grad.cwiseProduct(mask));
    });
  }

  Tensor sigmoid(const Tensor& a) {
    Matrix y = a.value().unaryExpr([](Real v) { return 1.0 / (1.0 + std::exp(-v)); });
    return record(std::move(y), {a}, [](Node& self) {
      if (!self.in(0).requires_grad) return;
      const Matrix& y = self.value;
      self.in(0).accumulate(self.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
  }

  Tensor exp(const Tensor& a) {
    return record(a.value().array().exp().matrix(), {a}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.cwiseProduct(self.value));
    });
  }

  Tensor log(const Tensor& a) {
    return record(a.value().array().log().matrix(), {a}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.cwiseQuotient(self.in(0).value));
    });
  }

  // Per-row normalization followed by the affine map gain (1xC) and bias (1xC).
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5) {
    require_shape(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
                  "layer_norm parameters must be 1x" + std::to_string(x.cols()));
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.cols();
    Matrix xhat(xv.rows(), n);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const Real mu = xv.row(r).mean();
      const Real var = (xv.row(r).array() - mu).square().mean();
      inv_std(r) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
    }
    Matrix y = xhat.cwiseProduct(gain.value().replicate(xv.rows(), 1)) + bias.value().replicate(xv.rows(), 1);
    return record(std::move(y), {x, gain, bias}, [xhat, inv_std, n](Node& self) {
      const Matrix& g = self.grad;
      if (self.in(0).requires_grad) {
        const Matrix dxhat = g.cwiseProduct(self.in(1).value.replicate(g.rows(), 1));
        Matrix dx(g.rows(), n);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Real m1 = dxhat.row(r).mean();
          const Real m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        self.in(0).accumulate(dx);
      }
      if (self.in(1).requires_grad) self.in(1).accumulate(g.cwiseProduct(xhat).colwise().sum());
      if (self.in(2).requires_grad) self.in(2).accumulate(g.colwise().sum());
    });
  }

  // ---- reductions and reshaping -----------------------------------------

  Tensor sum(const Tensor& a) {
    Matrix y(1, 1);
    y(0, 0) = a.value().sum();
    return record(std::move(y), {a}, [](Node& self) {
      if (self.in(0).requires_grad)
        self.in(0).accumulate(Matrix::Constant(self.in(0).value.rows(), self.in(0).value.cols(), self.grad(0, 0)));
    });
  }

  Tensor mean(const Tensor& a) {
    const auto count = static_cast<Real>(a.value().size());
    Matrix y(1, 1);
    y(0, 0) = a.value().sum() / count;
    return record(std::move(y), {a}, [count](Node& self) {
      if (self.in(0).requires_grad)
        self.in(0).accumulate(
            Matrix::Constant(self.in(0).value.rows(), self.in(0).value.cols(), self.grad(0, 0) / count));
    });
  }

  // Temporal mean: TxC -> 1xC.
  Tensor global_avg_pool_rows(const Tensor& a) {
    const auto rows = a.rows();
    return record(a.value().colwise().mean(), {a}, [rows](Node& self) {
      if (self.in(0).requires_grad)
        self.in(0).accumulate(self.grad.replicate(rows, 1) / static_cast<Real>(rows));
    });
  }

  // 1xC -> rows x C.
  Tensor broadcast_row(const Tensor& a, Eigen::Index rows) {
    require_shape(a.rows() == 1, "broadcast_row expects a single row, got " + shape_str(a.value()));
    return record(a.value().replicate(rows, 1), {a}, [](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.colwise().sum());
    });
  }

  Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_shape(a.rows() == b.rows(), "concat_cols " + shape_str(a.value()) + " | " + shape_str(b.value()));
    Matrix y(a.rows(), a.cols() + b.cols());
    y << a.value(), b.value();
    const auto split = a.cols();
    return record(std::move(y), {a, b}, [split](Node& self) {
      if (self.in(0).requires_grad) self.in(0).accumulate(self.grad.leftCols(split));
      if (self.in(1).requires_grad) self.in(1).accumulate(self.grad.rightCols(self.grad.cols() - split));
    });
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) { return concat(parts, /*by_rows=*/false); }
  Tensor concat_rows(const std::vector<Tensor>& parts) { return concat(parts, /*by_rows=*/true); }

  Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows out of range");
    return record(a.value().middleRows(start, count), {a}, [start, count](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      g.middleRows(start, count) = self.grad;
      self.in(0).accumulate(g);
    });
  }

  Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols out of range");
    return record(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      g.middleCols(start, count) = self.grad;
      self.in(0).accumulate(g);
    });
  }

  // Row minimum (R x 1). Subgradient goes to the lowest-index argmin.
  Tensor row_min(const Tensor& a) {
    const Matrix& x = a.value();
    Matrix y(x.rows(), 1);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < x.cols(); ++c)
        if (x(r, c) < x(r, best)) best = c;
      arg[static_cast<std::size_t>(r)] = best;
      y(r, 0) = x(r, best);
    }
    return record(std::move(y), {a}, [arg](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      for (std::size_t r = 0; r < arg.size(); ++r) g(static_cast<Eigen::Index>(r), arg[r]) = self.grad(r, 0);
      self.in(0).accumulate(g);
    });
  }

  // Column minimum (1 x C). Subgradient goes to the lowest-index argmin.
  Tensor col_min(const Tensor& a) {
    const Matrix& x = a.value();
    Matrix y(1, x.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = 0;
      for (Eigen::Index r = 1; r < x.rows(); ++r)
        if (x(r, c) < x(best, c)) best = r;
      arg[static_cast<std::size_t>(c)] = best;
      y(0, c) = x(best, c);
    }
    return record(std::move(y), {a}, [arg](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      for (std::size_t c = 0; c < arg.size(); ++c) g(arg[c], static_cast<Eigen::Index>(c)) = self.grad(0, c);
      self.in(0).accumulate(g);
    });
  }

  // Maximum over all entries (1x1), lowest flat index on ties.
  Tensor max_all(const Tensor& a) {
    const Matrix& x = a.value();
    Eigen::Index br = 0, bc = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c)
        if (x(r, c) > x(br, bc)) br = r, bc = c;
    Matrix y(1, 1);
    y(0, 0) = x(br, bc);
    return record(std::move(y), {a}, [br, bc](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      g(br, bc) = self.grad(0, 0);
      self.in(0).accumulate(g);
    });
  }

  // ---- similarity and alignment -----------------------------------------

  // Pairwise cosine similarity between rows: (Rx x C, Ry x C) -> Rx x Ry.
  Tensor cosine_similarity_rows(const Tensor& x, const Tensor& y) {
    Matrix s = cosine_similarity(x.value(), y.value());
    return record(std::move(s), {x, y}, [](Node& self) {
      const Matrix& xv = self.in(0).value;
      const Matrix& yv = self.in(1).value;
      const Matrix& s = self.value;
      const Matrix& g = self.grad;
      const Eigen::VectorXd xn = xv.rowwise().norm();
      const Eigen::VectorXd yn = yv.rowwise().norm();
      Matrix w(s.rows(), s.cols());   // g / den
      Matrix gs(s.rows(), s.cols());  // g * s on unclamped pairs
      for (Eigen::Index a = 0; a < s.rows(); ++a)
        for (Eigen::Index b = 0; b < s.cols(); ++b) {
          const Real prod = xn(a) * yn(b);
          const bool clamped = !(prod > kCosineEpsilon);
          w(a, b) = g(a, b) / (clamped ? kCosineEpsilon : prod);
          gs(a, b) = clamped ? 0.0 : g(a, b) * s(a, b);
        }
      if (self.in(0).requires_grad) {
        Matrix gx = w * yv;
        const Eigen::VectorXd coef = gs.rowwise().sum();
        for (Eigen::Index a = 0; a < xv.rows(); ++a)
          if (coef(a) != 0.0) gx.row(a) -= (coef(a) / (xn(a) * xn(a))) * xv.row(a);
        self.in(0).accumulate(gx);
      }
      if (self.in(1).requires_grad) {
        Matrix gy = w.transpose() * xv;
        const Eigen::VectorXd coef = gs.colwise().sum().transpose();
        for (Eigen::Index b = 0; b < yv.rows(); ++b)
          if (coef(b) != 0.0) gy.row(b) -= (coef(b) / (yn(b) * yn(b))) * yv.row(b);
        self.in(1).accumulate(gy);
      }
    });
  }

  // Classic DTW over a cost matrix with steps (1,0), (0,1), (1,1), anchored at
  // both corners, divided by (rows + cols). The subgradient follows the optimal
  // path; predecessor ties prefer the diagonal, then the row step.
  Tensor dtw_cost(const Tensor& cost) {
    const Matrix& d = cost.value();
    const Eigen::Index n = d.rows(), m = d.cols();
    require_shape(n > 0 && m > 0, "dtw on empty matrix");
    const Matrix acc = dtw_accumulate(d);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> path;
    Eigen::Index i = n - 1, j = m - 1;
    path.emplace_back(i, j);
    while (i > 0 || j > 0) {
      if (i == 0) {
        --j;
      } else if (j == 0) {
        --i;
      } else {
        const Real diag = acc(i - 1, j - 1), up = acc(i - 1, j), left = acc(i, j - 1);
        if (diag <= up && diag <= left) {
          --i, --j;
        } else if (up <= left) {
          --i;
        } else {
          --j;
        }
      }
      path.emplace_back(i, j);
    }
    const Real norm = static_cast<Real>(n + m);
    Matrix y(1, 1);
    y(0, 0) = acc(n - 1, m - 1) / norm;
    return record(std::move(y), {cost}, [path, norm](Node& self) {
      if (!self.in(0).requires_grad) return;
      Matrix g = Matrix::Zero(self.in(0).value.rows(), self.in(0).value.cols());
      for (const auto& [r, c] : path) g(r, c) += self.grad(0, 0) / norm;
      self.in(0).accumulate(g);
    });
  }

  static Matrix softmax_rows(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Real m = x.row(r).maxCoeff();
      y.row(r) = (x.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    return y;
  }

  static Matrix dtw_accumulate(const Matrix& d) {
    const Eigen::Index n = d.rows(), m = d.cols();
    Matrix acc(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        Real best;
        if (i == 0 && j == 0)
          best = 0.0;
        else if (i == 0)
          best = acc(i, j - 1);
        else if (j == 0)
          best = acc(i - 1, j);
        else
          best = std::min({acc(i - 1, j - 1), acc(i - 1, j), acc(i, j - 1)});
        acc(i, j) = d(i, j) + best;
      }
    return acc;
  }

 private:
  friend void backward(Tape& tape, const Tensor& loss);

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static void require_same(const Tensor& a, const Tensor& b, const char* op) {
    require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                  std::string(op) + " " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }

  Tensor concat(const std::vector<Tensor>& parts, bool by_rows) {
    if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat of zero tensors");
    Eigen::Index total = 0;
    std::vector<Eigen::Index> offsets;
    for (const auto& p : parts) {
      require_shape(by_rows ? p.cols() == parts.front().cols() : p.rows() == parts.front().rows(),
                    std::string("concat_") + (by_rows ? "rows" : "cols") + " with mismatched " +
                        shape_str(p.value()));
      offsets.push_back(total);
      total += by_rows ? p.rows() : p.cols();
    }
    Matrix y = by_rows ? Matrix(total, parts.front().cols()) : Matrix(parts.front().rows(), total);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (by_rows)
        y.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
      else
        y.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
    }
    return record_many(std::move(y), parts, [offsets, by_rows](Node& self) {
      for (std::size_t i = 0; i < self.inputs.size(); ++i) {
        Node& in = self.in(i);
        if (!in.requires_grad) continue;
        if (by_rows)
          in.accumulate(self.grad.middleRows(offsets[i], in.value.rows()));
        else
          in.accumulate(self.grad.middleCols(offsets[i], in.value.cols()));
      }
    });
  }

  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, std::function<void(Node&)> fn) {
    return record_many(std::move(value), std::vector<Tensor>(inputs), std::move(fn));
  }

  Tensor record_many(Matrix value, const std::vector<Tensor>& inputs, std::function<void(Node&)> fn) {
    bool needs_grad = false;
    for (const auto& t : inputs) {
      if (!t.defined()) throw Error(ErrorCode::DetachedTensor, "undefined tensor passed to a primitive");
      needs_grad = needs_grad || t.requires_grad();
    }
    if (!recording_ || !needs_grad) return Tensor::leaf(std::move(value), false);
    Tensor out = Tensor::leaf(std::move(value), true);
    Node& node = *out.node();
    node.inputs.reserve(inputs.size());
    for (const auto& t : inputs) node.inputs.push_back(t.node());
    node.backward = std::move(fn);
    node.tape_id = id_;
    node.tape_index = nodes_.size();
    nodes_.push_back(out.node());
    return out;
  }

  std::uint64_t id_;
  bool recording_ = true;
  std::vector<NodePtr> nodes_;
};

inline void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined()) throw Error(ErrorCode::DetachedTensor, "backward on an undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw Error(ErrorCode::NotScalar, "backward needs a 1x1 loss, got " + shape_str(loss.value()));
  const NodePtr& root = loss.node();
  if (root->tape_id != tape.id_ || root->tape_index >= tape.nodes_.size() ||
      tape.nodes_[root->tape_index] != root)
    throw Error(ErrorCode::DetachedTensor, "loss was not recorded on this tape");

  for (std::size_t i = 0; i <= root->tape_index; ++i) tape.nodes_[i]->grad.resize(0, 0);
  root->grad = Matrix::Ones(1, 1);
  for (std::size_t i = root->tape_index + 1; i-- > 0;) {
    Node& node = *tape.nodes_[i];
    if (node.grad.size() == 0) continue;
    node.backward(node);
  }
}

}  // namespace hyrsm::ag
