#pragma once

#include <algorithm>
#include <string>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

enum class Padding { same, valid };

/// Spatial bookkeeping for a square-kernel 2-D convolution.
struct ConvGeometry {
  Index in_h = 0, in_w = 0;
  Index out_h = 0, out_w = 0;
  Index kernel = 3;
  Index stride = 1;
  Index pad_top = 0, pad_left = 0;

  // "same" follows the usual convention: out = ceil(in / stride), with the odd
  // padding pixel placed at the bottom/right.
  static ConvGeometry make(Index in_h, Index in_w, Index kernel, Index stride, Padding padding) {
    ConvGeometry g;
    g.in_h = in_h;
    g.in_w = in_w;
    g.kernel = kernel;
    g.stride = stride;
    if (padding == Padding::same) {
      g.out_h = (in_h + stride - 1) / stride;
      g.out_w = (in_w + stride - 1) / stride;
      const Index pad_h = std::max<Index>((g.out_h - 1) * stride + kernel - in_h, 0);
      const Index pad_w = std::max<Index>((g.out_w - 1) * stride + kernel - in_w, 0);
      g.pad_top = pad_h / 2;
      g.pad_left = pad_w / 2;
    } else {
      g.out_h = in_h >= kernel ? (in_h - kernel) / stride + 1 : 0;
      g.out_w = in_w >= kernel ? (in_w - kernel) / stride + 1 : 0;
    }
    return g;
  }

  Index out_plane() const { return out_h * out_w; }
};

template <typename Scalar>
struct Conv2dParams {
  Tensor4<Scalar> weight;  // (out_channels, in_channels, k, k)
  Vector<Scalar> bias;     // out_channels
  Index stride = 1;
  Padding padding = Padding::same;

  Index out_channels() const { return weight.batch(); }
  Index in_channels() const { return weight.channels(); }
  Index kernel() const { return weight.height(); }

  ConvGeometry geometry(const Shape4& input) const {
    return ConvGeometry::make(input.h, input.w, kernel(), stride, padding);
  }
};

template <typename Scalar>
struct Conv2dGrads {
  Tensor4<Scalar> input;
  Tensor4<Scalar> weight;
  Vector<Scalar> bias;
};

namespace detail {

template <typename Scalar>
void check_conv_shapes(const Tensor4<Scalar>& input, const Conv2dParams<Scalar>& p) {
  if (p.weight.height() != p.weight.width()) {
    throw ShapeError("conv2d: kernel must be square, got " + to_string(p.weight.shape()));
  }
  if (input.channels() != p.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(input.channels()) +
                     " channels but kernel expects " + std::to_string(p.in_channels()));
  }
  if (p.bias.size() != p.out_channels()) {
    throw ShapeError("conv2d: bias length does not match output channels");
  }
  if (p.stride < 1) {
    throw ValidationError("conv2d: stride must be positive");
  }
}

// Unfolds receptive fields into a (C*k*k) x (N*out_plane) matrix; column
// n*out_plane + oy*out_w + ox holds the patch feeding output pixel (oy, ox) of
// sample n. Out-of-bounds taps are zero.
template <typename Scalar>
RowMatrix<Scalar> im2col(const Tensor4<Scalar>& input, const ConvGeometry& g) {
  const Index n_batch = input.batch();
  const Index channels = input.channels();
  const Index k = g.kernel;
  const Index plane = g.out_plane();
  RowMatrix<Scalar> cols(channels * k * k, n_batch * plane);
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols.row((c * k + ky) * k + kx).data();
        for (Index n = 0; n < n_batch; ++n) {
          const Scalar* src = input.data().data() + input.offset(n, c, 0, 0);
          Scalar* dst = row + n * plane;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride + ky - g.pad_top;
            Scalar* out_row = dst + oy * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(out_row, out_row + g.out_w, Scalar(0));
              continue;
            }
            const Scalar* in_row = src + iy * g.in_w;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride + kx - g.pad_left;
              out_row[ox] = (ix >= 0 && ix < g.in_w) ? in_row[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatters-and-adds columns back onto the input grid.
template <typename Scalar>
Tensor4<Scalar> col2im(const RowMatrix<Scalar>& cols, const Shape4& input_shape,
                       const ConvGeometry& g) {
  Tensor4<Scalar> out(input_shape);
  const Index k = g.kernel;
  const Index plane = g.out_plane();
  for (Index c = 0; c < input_shape.c; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = cols.row((c * k + ky) * k + kx).data();
        for (Index n = 0; n < input_shape.n; ++n) {
          Scalar* dst = out.data().data() + out.offset(n, c, 0, 0);
          const Scalar* src = row + n * plane;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride + ky - g.pad_top;
            if (iy < 0 || iy >= g.in_h) continue;
            Scalar* in_row = dst + iy * g.in_w;
            const Scalar* col_row = src + oy * g.out_w;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride + kx - g.pad_left;
              if (ix >= 0 && ix < g.in_w) in_row[ix] += col_row[ox];
            }
          }
        }
      }
    }
  }
  return out;
}

// (OC x N*P) matrix <-> (N, OC, out_h, out_w) tensor.
template <typename Scalar>
Tensor4<Scalar> unstack_channels(const RowMatrix<Scalar>& m, Index n_batch, const ConvGeometry& g) {
  const Index oc = m.rows();
  const Index plane = g.out_plane();
  Tensor4<Scalar> out(Shape4{n_batch, oc, g.out_h, g.out_w});
  for (Index n = 0; n < n_batch; ++n) {
    out.planes(n) = m.middleCols(n * plane, plane);
  }
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> stack_channels(const Tensor4<Scalar>& t) {
  const Index plane = t.shape().plane_size();
  RowMatrix<Scalar> m(t.channels(), t.batch() * plane);
  for (Index n = 0; n < t.batch(); ++n) {
    m.middleCols(n * plane, plane) = t.planes(n);
  }
  return m;
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> kernel_matrix(const Conv2dParams<Scalar>& p) {
  return {p.weight.data().data(), p.out_channels(), p.in_channels() * p.kernel() * p.kernel()};
}

}  // namespace detail

/// Forward 2-D convolution (cross-correlation) with bias.
template <typename Scalar>
Tensor4<Scalar> conv2d(const Tensor4<Scalar>& input, const Conv2dParams<Scalar>& params) {
  detail::check_conv_shapes(input, params);
  const ConvGeometry g = params.geometry(input.shape());
  const RowMatrix<Scalar> cols = detail::im2col(input, g);
  RowMatrix<Scalar> out = detail::kernel_matrix(params) * cols;
  out.colwise() += params.bias;
  return detail::unstack_channels(out, input.batch(), g);
}

/// Gradient with respect to the input only.
template <typename Scalar>
Tensor4<Scalar> conv2d_backward_input(const Tensor4<Scalar>& input_shape_like,
                                      const Conv2dParams<Scalar>& params,
                                      const Tensor4<Scalar>& grad_out) {
  const Shape4& in_shape = input_shape_like.shape();
  const ConvGeometry g = params.geometry(in_shape);
  const RowMatrix<Scalar> grad = detail::stack_channels(grad_out);
  const RowMatrix<Scalar> grad_cols = detail::kernel_matrix(params).transpose() * grad;
  return detail::col2im(grad_cols, in_shape, g);
}

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor4<Scalar>& input, const Conv2dParams<Scalar>& params,
                                    const Tensor4<Scalar>& grad_out) {
  detail::check_conv_shapes(input, params);
  const ConvGeometry g = params.geometry(input.shape());
  if (grad_out.shape() != Shape4{input.batch(), params.out_channels(), g.out_h, g.out_w}) {
    throw ShapeError("conv2d_backward: grad_out shape " + to_string(grad_out.shape()) +
                     " does not match forward output");
  }
  const RowMatrix<Scalar> cols = detail::im2col(input, g);
  const RowMatrix<Scalar> grad = detail::stack_channels(grad_out);

  Conv2dGrads<Scalar> grads;
  grads.weight = Tensor4<Scalar>(params.weight.shape());
  Eigen::Map<RowMatrix<Scalar>>(grads.weight.data().data(), params.out_channels(), cols.rows())
      .noalias() = grad * cols.transpose();
  grads.bias = grad.rowwise().sum();
  const RowMatrix<Scalar> grad_cols = detail::kernel_matrix(params).transpose() * grad;
  grads.input = detail::col2im(grad_cols, input.shape(), g);
  return grads;
}

}  // namespace densiscope
