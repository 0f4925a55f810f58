#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <ostream>
#include <string>

#include "densiscope/errors.hpp"

namespace densiscope {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dimensions of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape4 {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return n * c * h * w; }
  Index sample_size() const { return c * h * w; }
  Index plane_size() const { return h * w; }

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
         ", " + std::to_string(s.w) + ")";
}

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) { return os << to_string(s); }

/// Dense rank-4 array stored contiguously in row-major, batch-outermost order.
template <typename Scalar_>
class Tensor4 {
 public:
  using Scalar = Scalar_;
  using VectorType = Vector<Scalar>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor4() = default;

  explicit Tensor4(const Shape4& shape) : shape_(shape), data_(VectorType::Zero(checked(shape))) {}

  Tensor4(const Shape4& shape, Scalar fill)
      : shape_(shape), data_(VectorType::Constant(checked(shape), fill)) {}

  Tensor4(const Shape4& shape, VectorType data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != checked(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape));
    }
  }

  const Shape4& shape() const { return shape_; }
  Index batch() const { return shape_.n; }
  Index channels() const { return shape_.c; }
  Index height() const { return shape_.h; }
  Index width() const { return shape_.w; }
  Index size() const { return data_.size(); }

  VectorType& data() { return data_; }
  const VectorType& data() const { return data_; }

  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  /// Batch viewed as an N x (C*H*W) row-major matrix.
  MatrixMap as_matrix() { return MatrixMap(data_.data(), shape_.n, shape_.sample_size()); }
  ConstMatrixMap as_matrix() const {
    return ConstMatrixMap(data_.data(), shape_.n, shape_.sample_size());
  }

  /// One sample viewed as a C x (H*W) row-major matrix.
  MatrixMap planes(Index n) {
    return MatrixMap(data_.data() + n * shape_.sample_size(), shape_.c, shape_.plane_size());
  }
  ConstMatrixMap planes(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.sample_size(), shape_.c, shape_.plane_size());
  }

  /// Copy of the samples [first, first + count).
  Tensor4 slice_batch(Index first, Index count) const {
    Shape4 s = shape_;
    s.n = count;
    return Tensor4(s, data_.segment(first * shape_.sample_size(), s.size()));
  }

  /// Same data, different dimensions; total size must be preserved.
  Tensor4 reshaped(const Shape4& s) const { return Tensor4(s, data_); }

  template <typename To>
  Tensor4<To> cast() const {
    return Tensor4<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static Index checked(const Shape4& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw ShapeError("negative tensor dimension in " + to_string(s));
    }
    return s.size();
  }

  Shape4 shape_;
  VectorType data_;
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

enum class Mode { train, infer };

}  // namespace densiscope
