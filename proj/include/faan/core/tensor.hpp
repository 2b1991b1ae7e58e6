#ifndef FAAN_CORE_TENSOR_HPP
#define FAAN_CORE_TENSOR_HPP

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace faan {

using Index = Eigen::Index;

/// Row-major dense matrix. Every value in the library is stored this way;
/// vectors are 1 x n rows.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite detection on every recorded op. On by default unless NDEBUG.
bool finite_checks_enabled() noexcept;
void set_finite_checks(bool enabled) noexcept;

template <typename Derived>
void check_finite(const Eigen::MatrixBase<Derived>& m, const char* where) {
  if (finite_checks_enabled() && !m.allFinite()) {
    throw Error(std::string("non-finite value produced by ") + where);
  }
}

/// Dense tensor of rank 0, 1 or 2 with an optional gradient accumulator.
///
/// Storage is a 2-D row-major matrix: rank 0 is 1x1, rank 1 of length n is
/// 1xn, rank 2 is rows x cols. Higher ranks are not needed by the model.
template <typename Scalar>
class Tensor {
 public:
  using MatrixType = Matrix<Scalar>;

  Tensor() = default;

  explicit Tensor(std::vector<Index> shape, bool requires_grad = false)
      : shape_(std::move(shape)) {
    auto [r, c] = storage_dims(shape_);
    value_ = MatrixType::Zero(r, c);
    set_requires_grad(requires_grad);
  }

  Tensor(std::vector<Index> shape, MatrixType values, bool requires_grad = false)
      : shape_(std::move(shape)), value_(std::move(values)) {
    auto [r, c] = storage_dims(shape_);
    if (value_.rows() * value_.cols() != r * c) {
      throw Error("tensor data length does not match shape");
    }
    value_.resize(r, c);
    set_requires_grad(requires_grad);
  }

  static Tensor from_matrix(MatrixType values, bool requires_grad = false) {
    std::vector<Index> shape{values.rows(), values.cols()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  const std::vector<Index>& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return value_.size(); }
  Index rows() const noexcept { return value_.rows(); }
  Index cols() const noexcept { return value_.cols(); }

  MatrixType& value() noexcept { return value_; }
  const MatrixType& value() const noexcept { return value_; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
      grad_ = MatrixType::Zero(value_.rows(), value_.cols());
    } else {
      grad_.resize(0, 0);
    }
  }

  MatrixType& grad() {
    if (!requires_grad_) throw Error("tensor does not track gradients");
    return grad_;
  }
  const MatrixType& grad() const {
    if (!requires_grad_) throw Error("tensor does not track gradients");
    return grad_;
  }

  void zero_grad() {
    if (requires_grad_) grad_.setZero();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, value_.template cast<Other>().eval(), requires_grad_);
  }

  static std::pair<Index, Index> storage_dims(const std::vector<Index>& shape) {
    for (Index d : shape) {
      if (d < 0) throw Error("negative tensor dimension");
    }
    switch (shape.size()) {
      case 0: return {1, 1};
      case 1: return {1, shape[0]};
      case 2: return {shape[0], shape[1]};
      default: throw Error("tensors above rank 2 are not supported");
    }
  }

 private:
  std::vector<Index> shape_{0, 0};
  MatrixType value_;
  MatrixType grad_;
  bool requires_grad_ = false;
};

}  // namespace faan

#endif  // FAAN_CORE_TENSOR_HPP
