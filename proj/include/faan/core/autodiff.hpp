#ifndef FAAN_CORE_AUTODIFF_HPP
#define FAAN_CORE_AUTODIFF_HPP

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "faan/core/tensor.hpp"

namespace faan {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy.
template <typename Scalar>
class Var {
 public:
  using MatrixType = Matrix<Scalar>;

  Var() = default;

  Tape<Scalar>* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const MatrixType& value() const { return tape_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Linear record of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order and backward() walks it in reverse. Leaves bound to a
/// Tensor read its value in place and accumulate straight into its grad.
/// A non-recording tape keeps values only; use it for evaluation.
template <typename Scalar>
class Tape {
 public:
  using MatrixType = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const MatrixType& grad, const MatrixType& value)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<Scalar> constant(MatrixType value) {
    check_finite(value, "constant");
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  /// Leaf bound to a tensor. Gradients flow into tensor.grad() only when the
  /// tensor tracks them and the tape records.
  Var<Scalar> parameter(Tensor<Scalar>& tensor) {
    Node n;
    n.tensor = &tensor;
    n.needs_grad = record_ && tensor.requires_grad();
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  Var<Scalar> parameter(const Tensor<Scalar>& tensor) {
    Node n;
    n.tensor = const_cast<Tensor<Scalar>*>(&tensor);
    n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  Var<Scalar> push(MatrixType value, std::initializer_list<Var<Scalar>> inputs,
                   Backward backward, const char* op_name = "op") {
    return push_span(std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                     std::move(backward), op_name);
  }

  Var<Scalar> push_span(MatrixType value, std::span<const Var<Scalar>> inputs, Backward backward,
                        const char* op_name = "op") {
    check_finite(value, op_name);
    Node n;
    n.value = std::move(value);
    if (record_) {
      for (const auto& in : inputs) {
        if (in.tape_ != this) throw Error("variables from different tapes");
        if (nodes_[static_cast<std::size_t>(in.id_)].needs_grad) {
          n.needs_grad = true;
          break;
        }
      }
      if (n.needs_grad) n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  const MatrixType& value(const Var<Scalar>& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id_)];
    return n.tensor ? n.tensor->value() : n.value;
  }

  bool needs_grad(const Var<Scalar>& v) const {
    return nodes_[static_cast<std::size_t>(v.id_)].needs_grad;
  }

  /// Gradient accumulator of v, zero-initialized on first touch.
  MatrixType& grad(const Var<Scalar>& v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id_)];
    if (n.tensor) return n.tensor->grad();
    if (n.grad.size() == 0) {
      n.grad = MatrixType::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and propagates. Tensor gradients accumulate
  /// across calls; intermediate gradients are reset on every call.
  void backward(const Var<Scalar>& root) {
    if (!record_) throw Error("backward() on a non-recording tape");
    if (root.tape_ != this) throw Error("root belongs to another tape");
    const MatrixType& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) throw Error("backward() needs a scalar root");
    for (auto& n : nodes_) {
      if (!n.tensor) n.grad.resize(0, 0);
    }
    if (!nodes_[static_cast<std::size_t>(root.id_)].needs_grad) return;
    grad(root)(0, 0) += Scalar(1);
    for (int i = root.id_; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad, n.value);
    }
  }

 private:
  friend class Var<Scalar>;

  struct Node {
    MatrixType value;
    MatrixType grad;
    Tensor<Scalar>* tensor = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  bool record_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  return a.tape()->push(
      a.value() + b.value(), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a) += g;
        if (t.needs_grad(b)) t.grad(b) += g;
      },
      "add");
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  return a.tape()->push(
      a.value() - b.value(), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a) += g;
        if (t.needs_grad(b)) t.grad(b) -= g;
      },
      "sub");
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}

/// Hadamard product.
template <typename Scalar>
Var<Scalar> cwise_mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "cwise_mul");
  return a.tape()->push(
      a.value().cwiseProduct(b.value()), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a) += g.cwiseProduct(b.value());
        if (t.needs_grad(b)) t.grad(b) += g.cwiseProduct(a.value());
      },
      "cwise_mul");
}

/// Multiplies by a constant matrix (dropout masks, selection masks).
template <typename Scalar>
Var<Scalar> mask_mul(const Var<Scalar>& a, Matrix<Scalar> mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw Error("mask_mul: shape mismatch");
  Matrix<Scalar> out = a.value().cwiseProduct(mask);
  return a.tape()->push(
      std::move(out), {a},
      [a, mask = std::move(mask)](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        t.grad(a) += g.cwiseProduct(mask);
      },
      "mask_mul");
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return a.tape()->push(
      a.value() * s, {a},
      [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) { t.grad(a) += g * s; }, "scale");
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  return a.tape()->push(
      (a.value().array() + s).matrix(), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) { t.grad(a) += g; }, "add_scalar");
}

/// x (n x m) + row (1 x m), the row broadcast down every row of x.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& x, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw Error("add_row: shape mismatch");
  Matrix<Scalar> out = x.value().rowwise() + row.value().row(0);
  return x.tape()->push(
      std::move(out), {x, row},
      [x, row](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(x)) t.grad(x) += g;
        if (t.needs_grad(row)) t.grad(row) += g.colwise().sum();
      },
      "add_row");
}

// ---------------------------------------------------------------------------
// Products

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape()->push(
      std::move(out), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a).noalias() += g * b.value().transpose();
        if (t.needs_grad(b)) t.grad(b).noalias() += a.value().transpose() * g;
      },
      "matmul");
}

/// a * b^T.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimension mismatch");
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return a.tape()->push(
      std::move(out), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a).noalias() += g * b.value();
        if (t.needs_grad(b)) t.grad(b).noalias() += g.transpose() * a.value();
      },
      "matmul_nt");
}

/// Per-row dot product: (n x m, n x m) -> n x 1.
template <typename Scalar>
Var<Scalar> rowwise_dot(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "rowwise_dot");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return a.tape()->push(
      std::move(out), {a, b},
      [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a) += (b.value().array().colwise() * g.col(0).array()).matrix();
        if (t.needs_grad(b)) t.grad(b) += (a.value().array().colwise() * g.col(0).array()).matrix();
      },
      "rowwise_dot");
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        t.grad(a) += (a.value().array() > Scalar(0)).select(g, Scalar(0)).matrix();
      },
      "relu");
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Matrix<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
        const auto s = y.array();
        t.grad(a) += (g.array() * s * (Scalar(1) - s)).matrix();
      },
      "sigmoid");
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().array().tanh().matrix();
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& y) {
        const auto v = y.array();
        t.grad(a) += (g.array() * (Scalar(1) - v * v)).matrix();
      },
      "tanh");
}

namespace detail {

template <typename Scalar, typename RowIn, typename RowOut>
void stable_softmax_row(const RowIn& in, RowOut&& out) {
  const Scalar m = in.maxCoeff();
  out = (in.array() - m).exp();
  out /= out.sum();
}

}  // namespace detail

/// Softmax over each row, computed with max subtraction.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  const auto& x = a.value();
  if (x.cols() == 0) throw Error("empty attention domain");
  if (!x.allFinite()) throw Error("softmax: non-finite input");
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) detail::stable_softmax_row<Scalar>(x.row(i), out.row(i));
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>& p) {
        Matrix<Scalar> inner = p.cwiseProduct(g).rowwise().sum();
        t.grad(a) += (p.array() * (g.array().colwise() - inner.col(0).array())).matrix();
      },
      "softmax");
}

/// Softmax of a single vector (1 x n).
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& v) {
  if (v.value().size() == 0) throw Error("empty attention domain");
  if (v.rows() != 1) throw Error("softmax: expected a row vector");
  return softmax_rows(v);
}

/// Inverted dropout with a caller-provided keep mask already scaled by
/// 1/(1-rate).
template <typename Scalar, typename Rng>
Matrix<Scalar> dropout_mask(Index rows, Index cols, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must be in [0, 1)");
  Matrix<Scalar> mask(rows, cols);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  for (Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  }
  return mask;
}

template <typename Scalar, typename Rng>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  return mask_mul(x, dropout_mask<Scalar>(x.rows(), x.cols(), rate, rng));
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) { t.grad(a).array() += g(0, 0); }, "sum");
}

/// Sum of squares of all entries, 1 x 1.
template <typename Scalar>
Var<Scalar> squared_norm(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.tape()->push(
      std::move(out), {a},
      [a](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) { t.grad(a) += (Scalar(2) * g(0, 0)) * a.value(); },
      "squared_norm");
}

/// Column means, 1 x m.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a) {
  if (a.rows() == 0) throw Error("mean_rows: empty input");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows());
  Matrix<Scalar> out = a.value().colwise().sum() * inv;
  return a.tape()->push(
      std::move(out), {a},
      [a, inv](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        t.grad(a).rowwise() += g.row(0) * inv;
      },
      "mean_rows");
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// out.row(i) = a.row(index[i]). Repeated indices scatter-add on backward,
/// which makes this both the embedding lookup and the broadcast primitive.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<Index> index) {
  const auto& x = a.value();
  Matrix<Scalar> out(static_cast<Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw Error("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.row(index[i]);
  }
  return a.tape()->push(
      std::move(out), {a},
      [a, index = std::move(index)](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Index>(i));
      },
      "gather_rows");
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw Error("concat_rows: nothing to concatenate");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<Scalar>> ins(parts.begin(), parts.end());
  return parts.front().tape()->push_span(
      std::move(out), parts,
      [ins](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        Index r0 = 0;
        for (const auto& p : ins) {
          const Index n = p.rows();
          if (t.needs_grad(p)) t.grad(p) += g.middleRows(r0, n);
          r0 += n;
        }
      },
      "concat_rows");
}

template <typename Scalar>
Var<Scalar> concat_rows(std::initializer_list<Var<Scalar>> parts) {
  return concat_rows(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> concat_cols(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) throw Error("concat_cols: row mismatch");
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index ac = a.cols();
  const Index bc = b.cols();
  return a.tape()->push(
      std::move(out), {a, b},
      [a, b, ac, bc](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(a)) t.grad(a) += g.leftCols(ac);
        if (t.needs_grad(b)) t.grad(b) += g.rightCols(bc);
      },
      "concat_cols");
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: out of range");
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return a.tape()->push(
      std::move(out), {a},
      [a, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        t.grad(a).middleCols(start, count) += g;
      },
      "slice_cols");
}

// ---------------------------------------------------------------------------
// Segmented ops. Segment s spans rows [offsets[s], offsets[s+1]).

/// Softmax of an n x 1 score column within each segment. Empty segments
/// contribute no rows.
template <typename Scalar>
Var<Scalar> segment_softmax(const Var<Scalar>& scores, std::vector<Index> offsets) {
  const auto& x = scores.value();
  if (x.cols() != 1) throw Error("segment_softmax: expected a score column");
  if (offsets.empty() || offsets.back() != x.rows()) throw Error("segment_softmax: bad offsets");
  if (!x.allFinite()) throw Error("softmax: non-finite input");
  Matrix<Scalar> out(x.rows(), 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const Index b = offsets[s];
    const Index n = offsets[s + 1] - b;
    if (n == 0) continue;
    detail::stable_softmax_row<Scalar>(x.col(0).segment(b, n).transpose(),
                                       out.col(0).segment(b, n).transpose());
  }
  return scores.tape()->push(
      std::move(out), {scores},
      [scores, offsets = std::move(offsets)](Tape<Scalar>& t, const Matrix<Scalar>& g,
                                             const Matrix<Scalar>& p) {
        auto& gs = t.grad(scores);
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const Index b = offsets[s];
          const Index n = offsets[s + 1] - b;
          if (n == 0) continue;
          const Scalar inner = p.col(0).segment(b, n).dot(g.col(0).segment(b, n));
          gs.col(0).segment(b, n).array() +=
              p.col(0).segment(b, n).array() * (g.col(0).segment(b, n).array() - inner);
        }
      },
      "segment_softmax");
}

/// out.row(s) = sum over rows j of segment s of weights(j) * values.row(j).
template <typename Scalar>
Var<Scalar> segment_weighted_sum(const Var<Scalar>& weights, const Var<Scalar>& values,
                                 std::vector<Index> offsets) {
  const auto& w = weights.value();
  const auto& v = values.value();
  if (w.cols() != 1 || w.rows() != v.rows()) throw Error("segment_weighted_sum: shape mismatch");
  if (offsets.empty() || offsets.back() != v.rows()) throw Error("segment_weighted_sum: bad offsets");
  const Index segments = static_cast<Index>(offsets.size()) - 1;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(segments, v.cols());
  for (Index s = 0; s < segments; ++s) {
    for (Index j = offsets[s]; j < offsets[s + 1]; ++j) out.row(s) += w(j, 0) * v.row(j);
  }
  return weights.tape()->push(
      std::move(out), {weights, values},
      [weights, values, offsets = std::move(offsets)](Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const bool gw = t.needs_grad(weights);
        const bool gv = t.needs_grad(values);
        const auto& wv = weights.value();
        const auto& vv = values.value();
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const Index si = static_cast<Index>(s);
          for (Index j = offsets[s]; j < offsets[s + 1]; ++j) {
            if (gw) t.grad(weights)(j, 0) += g.row(si).dot(vv.row(j));
            if (gv) t.grad(values).row(j) += wv(j, 0) * g.row(si);
          }
        }
      },
      "segment_weighted_sum");
}

// ---------------------------------------------------------------------------
// Transformer pieces

/// Row-wise layer normalization with learned gain and shift (both 1 x m).
template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& shift,
                            Scalar eps = Scalar(1e-5)) {
  const auto& xv = x.value();
  const Index m = xv.cols();
  if (gain.cols() != m || shift.cols() != m || gain.rows() != 1 || shift.rows() != 1) {
    throw Error("layer_norm_rows: shape mismatch");
  }
  Matrix<Scalar> xhat(xv.rows(), m);
  Matrix<Scalar> rstd(xv.rows(), 1);
  for (Index i = 0; i < xv.rows(); ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    rstd(i, 0) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * rstd(i, 0);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
                       shift.value().row(0).array();
  return x.tape()->push(
      std::move(out), {x, gain, shift},
      [x, gain, shift, xhat = std::move(xhat), rstd = std::move(rstd)](
          Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        if (t.needs_grad(gain)) t.grad(gain) += g.cwiseProduct(xhat).colwise().sum();
        if (t.needs_grad(shift)) t.grad(shift) += g.colwise().sum();
        if (t.needs_grad(x)) {
          Matrix<Scalar> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
          auto& gx = t.grad(x);
          for (Index i = 0; i < dxhat.rows(); ++i) {
            const Scalar mean_d = dxhat.row(i).mean();
            const Scalar mean_dx = dxhat.row(i).dot(xhat.row(i)) / static_cast<Scalar>(xhat.cols());
            gx.row(i).array() +=
                rstd(i, 0) * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
          }
        }
      },
      "layer_norm");
}

/// Multi-head scaled dot-product self-attention applied independently to
/// consecutive blocks of `group` rows (one short sequence per block).
///
/// q, k, v: (blocks*group) x width; width must be divisible by heads.
/// `drop`, when non-empty, is a (blocks*heads*group) x group multiplier on the
/// attention probabilities. `probs_out`, when given, receives the
/// probabilities in that same layout.
template <typename Scalar>
Var<Scalar> grouped_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                              Index group, Index heads, Matrix<Scalar> drop = {},
                              Matrix<Scalar>* probs_out = nullptr) {
  detail::require_same_shape(q, k, "grouped_attention");
  detail::require_same_shape(q, v, "grouped_attention");
  const Index rows = q.rows();
  const Index width = q.cols();
  if (group <= 0 || rows % group != 0) throw Error("grouped_attention: rows not a multiple of group");
  if (heads <= 0 || width % heads != 0) throw Error("grouped_attention: heads must divide width");
  const Index blocks = rows / group;
  const Index dh = width / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const bool use_drop = drop.size() != 0;
  if (use_drop && (drop.rows() != blocks * heads * group || drop.cols() != group)) {
    throw Error("grouped_attention: dropout mask shape");
  }

  Matrix<Scalar> probs(blocks * heads * group, group);
  Matrix<Scalar> out(rows, width);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (Index b = 0; b < blocks; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = qv.block(b * group, h * dh, group, dh);
      auto kb = kv.block(b * group, h * dh, group, dh);
      auto vb = vv.block(b * group, h * dh, group, dh);
      auto pb = probs.middleRows((b * heads + h) * group, group);
      Matrix<Scalar> s = (qb * kb.transpose()) * inv_sqrt;
      for (Index i = 0; i < group; ++i) detail::stable_softmax_row<Scalar>(s.row(i), pb.row(i));
      if (use_drop) {
        out.block(b * group, h * dh, group, dh).noalias() =
            pb.cwiseProduct(drop.middleRows((b * heads + h) * group, group)) * vb;
      } else {
        out.block(b * group, h * dh, group, dh).noalias() = pb * vb;
      }
    }
  }
  if (probs_out) *probs_out = probs;

  return q.tape()->push(
      std::move(out), {q, k, v},
      [q, k, v, group, heads, dh, inv_sqrt, probs = std::move(probs), drop = std::move(drop)](
          Tape<Scalar>& t, const Matrix<Scalar>& g, const Matrix<Scalar>&) {
        const bool gq = t.needs_grad(q);
        const bool gk = t.needs_grad(k);
        const bool gv = t.needs_grad(v);
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        const bool use_drop = drop.size() != 0;
        const Index blocks = qv.rows() / group;
        for (Index b = 0; b < blocks; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Index pr = (b * heads + h) * group;
            auto qb = qv.block(b * group, h * dh, group, dh);
            auto kb = kv.block(b * group, h * dh, group, dh);
            auto vb = vv.block(b * group, h * dh, group, dh);
            auto gb = g.block(b * group, h * dh, group, dh);
            Matrix<Scalar> p = probs.middleRows(pr, group);
            Matrix<Scalar> pd = use_drop ? Matrix<Scalar>(p.cwiseProduct(drop.middleRows(pr, group))) : p;
            if (gv) t.grad(v).block(b * group, h * dh, group, dh).noalias() += pd.transpose() * gb;
            if (!gq && !gk) continue;
            Matrix<Scalar> dpd = gb * vb.transpose();
            Matrix<Scalar> dp = use_drop ? Matrix<Scalar>(dpd.cwiseProduct(drop.middleRows(pr, group))) : dpd;
            Matrix<Scalar> inner = p.cwiseProduct(dp).rowwise().sum();
            Matrix<Scalar> ds = (p.array() * (dp.array().colwise() - inner.col(0).array())).matrix() * inv_sqrt;
            if (gq) t.grad(q).block(b * group, h * dh, group, dh).noalias() += ds * kb;
            if (gk) t.grad(k).block(b * group, h * dh, group, dh).noalias() += ds.transpose() * qb;
          }
        }
      },
      "grouped_attention");
}

}  // namespace faan

#endif  // FAAN_CORE_AUTODIFF_HPP
