#pragma once

#include <string>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

/// Fully connected layer y = x W + b; the input is flattened per sample.
template <typename Scalar>
struct DenseParams {
  RowMatrix<Scalar> weight;  // in_features x out_features
  Vector<Scalar> bias;       // out_features

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
};

template <typename Scalar>
struct DenseGrads {
  Tensor4<Scalar> input;
  RowMatrix<Scalar> weight;
  Vector<Scalar> bias;
};

namespace detail {
template <typename Scalar>
void check_dense_shapes(const Tensor4<Scalar>& input, const DenseParams<Scalar>& p) {
  if (input.shape().sample_size() != p.in_features()) {
    throw ShapeError("dense: input width " + std::to_string(input.shape().sample_size()) +
                     " does not match weight rows " + std::to_string(p.in_features()));
  }
  if (p.bias.size() != p.out_features()) throw ShapeError("dense: bias length");
}
}  // namespace detail

/// Output has shape (N, out_features, 1, 1).
template <typename Scalar>
Tensor4<Scalar> dense(const Tensor4<Scalar>& input, const DenseParams<Scalar>& params) {
  detail::check_dense_shapes(input, params);
  Tensor4<Scalar> out(Shape4{input.batch(), params.out_features(), 1, 1});
  auto y = out.as_matrix();
  y.noalias() = input.as_matrix() * params.weight;
  y.rowwise() += params.bias.transpose();
  return out;
}

template <typename Scalar>
Tensor4<Scalar> dense_backward_input(const Shape4& input_shape, const DenseParams<Scalar>& params,
                                     const Tensor4<Scalar>& grad_out) {
  Tensor4<Scalar> grad_in(input_shape);
  grad_in.as_matrix().noalias() = grad_out.as_matrix() * params.weight.transpose();
  return grad_in;
}

template <typename Scalar>
DenseGrads<Scalar> dense_backward(const Tensor4<Scalar>& input, const DenseParams<Scalar>& params,
                                  const Tensor4<Scalar>& grad_out) {
  detail::check_dense_shapes(input, params);
  if (grad_out.shape() != Shape4{input.batch(), params.out_features(), 1, 1}) {
    throw ShapeError("dense_backward: grad_out shape " + to_string(grad_out.shape()));
  }
  DenseGrads<Scalar> g;
  g.weight.noalias() = input.as_matrix().transpose() * grad_out.as_matrix();
  g.bias = grad_out.as_matrix().colwise().sum().transpose();
  g.input = dense_backward_input(input.shape(), params, grad_out);
  return g;
}

}  // namespace densiscope
