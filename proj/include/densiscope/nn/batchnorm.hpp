#pragma once

#include <cmath>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

/// Per-channel batch normalization state. Running statistics follow
/// running = momentum * running + (1 - momentum) * batch.
template <typename Scalar>
struct BatchNormParams {
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
  Vector<Scalar> running_mean;
  Vector<Scalar> running_var;
  Scalar momentum = Scalar(0.99);
  Scalar epsilon = Scalar(1e-5);

  static BatchNormParams identity(Index channels) {
    BatchNormParams p;
    p.gamma = Vector<Scalar>::Ones(channels);
    p.beta = Vector<Scalar>::Zero(channels);
    p.running_mean = Vector<Scalar>::Zero(channels);
    p.running_var = Vector<Scalar>::Ones(channels);
    return p;
  }

  Index channels() const { return gamma.size(); }

  /// Inference-mode normalization written as y = scale * x + shift.
  std::pair<Vector<Scalar>, Vector<Scalar>> folded() const {
    Vector<Scalar> scale = gamma.array() / (running_var.array() + epsilon).sqrt();
    Vector<Scalar> shift = beta.array() - scale.array() * running_mean.array();
    return {scale, shift};
  }
};

template <typename Scalar>
struct BatchNormGrads {
  Tensor4<Scalar> input;
  Vector<Scalar> gamma;
  Vector<Scalar> beta;
};

namespace detail {

template <typename Scalar>
void check_bn_shapes(const Tensor4<Scalar>& input, const BatchNormParams<Scalar>& p) {
  if (input.channels() != p.channels() || p.beta.size() != p.channels() ||
      p.running_mean.size() != p.channels() || p.running_var.size() != p.channels()) {
    throw ShapeError("batchnorm: parameter length does not match " +
                     std::to_string(input.channels()) + " input channels");
  }
  if (!(p.epsilon > 0)) throw ValidationError("batchnorm: epsilon must be positive");
}

// Biased per-channel mean and variance over (N, H, W).
template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> channel_moments(const Tensor4<Scalar>& x) {
  const Index channels = x.channels();
  const Index count = x.batch() * x.shape().plane_size();
  Vector<Scalar> mean = Vector<Scalar>::Zero(channels);
  Vector<Scalar> var = Vector<Scalar>::Zero(channels);
  for (Index n = 0; n < x.batch(); ++n) mean += x.planes(n).rowwise().sum();
  mean /= Scalar(count);
  for (Index n = 0; n < x.batch(); ++n) {
    var += (x.planes(n).colwise() - mean).rowwise().squaredNorm();
  }
  var /= Scalar(count);
  return {mean, var};
}

}  // namespace detail

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates the running statistics in `params`; infer mode uses the running
/// statistics and leaves `params` untouched.
template <typename Scalar>
Tensor4<Scalar> batchnorm(const Tensor4<Scalar>& input, BatchNormParams<Scalar>& params, Mode mode) {
  detail::check_bn_shapes(input, params);
  Vector<Scalar> scale, shift;
  if (mode == Mode::train) {
    if (input.batch() * input.shape().plane_size() < 2) {
      throw ValidationError("batchnorm: train mode needs more than one value per channel");
    }
    auto [mean, var] = detail::channel_moments(input);
    scale = params.gamma.array() / (var.array() + params.epsilon).sqrt();
    shift = params.beta.array() - scale.array() * mean.array();
    params.running_mean = params.momentum * params.running_mean + (1 - params.momentum) * mean;
    params.running_var = params.momentum * params.running_var + (1 - params.momentum) * var;
  } else {
    std::tie(scale, shift) = params.folded();
  }
  Tensor4<Scalar> out(input.shape());
  for (Index n = 0; n < input.batch(); ++n) {
    out.planes(n) = (input.planes(n).array().colwise() * scale.array()).colwise() + shift.array();
  }
  return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor4<Scalar>& input,
                                          const BatchNormParams<Scalar>& params,
                                          const Tensor4<Scalar>& grad_out, Mode mode) {
  detail::check_bn_shapes(input, params);
  if (grad_out.shape() != input.shape()) throw ShapeError("batchnorm_backward: grad_out shape");
  const Index channels = input.channels();
  BatchNormGrads<Scalar> g{Tensor4<Scalar>(input.shape()), Vector<Scalar>::Zero(channels),
                           Vector<Scalar>::Zero(channels)};

  Vector<Scalar> mean, var;
  if (mode == Mode::train) {
    std::tie(mean, var) = detail::channel_moments(input);
  } else {
    mean = params.running_mean;
    var = params.running_var;
  }
  const Vector<Scalar> inv_std = (var.array() + params.epsilon).rsqrt();

  // sum(dy) and sum(dy * xhat) per channel.
  Vector<Scalar> sum_dy = Vector<Scalar>::Zero(channels);
  Vector<Scalar> sum_dy_xhat = Vector<Scalar>::Zero(channels);
  for (Index n = 0; n < input.batch(); ++n) {
    const auto dy = grad_out.planes(n).array();
    const auto xhat = (input.planes(n).array().colwise() - mean.array()).colwise() * inv_std.array();
    sum_dy += dy.rowwise().sum().matrix();
    sum_dy_xhat += (dy * xhat).rowwise().sum().matrix();
  }
  g.beta = sum_dy;
  g.gamma = sum_dy_xhat;

  const Vector<Scalar> a = params.gamma.cwiseProduct(inv_std);
  if (mode == Mode::infer) {
    for (Index n = 0; n < input.batch(); ++n) {
      g.input.planes(n) = grad_out.planes(n).array().colwise() * a.array();
    }
    return g;
  }
  const Scalar count = Scalar(input.batch() * input.shape().plane_size());
  const Vector<Scalar> mean_dy = sum_dy / count;
  const Vector<Scalar> mean_dy_xhat = sum_dy_xhat / count;
  for (Index n = 0; n < input.batch(); ++n) {
    const auto xhat = (input.planes(n).array().colwise() - mean.array()).colwise() * inv_std.array();
    g.input.planes(n) = ((grad_out.planes(n).array().colwise() - mean_dy.array()) -
                         xhat.colwise() * mean_dy_xhat.array())
                            .colwise() *
                        a.array();
  }
  return g;
}

}  // namespace densiscope
