#pragma once

#include <cstdint>
#include <random>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

template <typename Scalar>
Tensor4<Scalar> relu(const Tensor4<Scalar>& input) {
  return Tensor4<Scalar>(input.shape(), input.data().cwiseMax(Scalar(0)));
}

// The subgradient at 0 is taken as 0.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& input, const Tensor4<Scalar>& grad_out) {
  if (grad_out.shape() != input.shape()) throw ShapeError("relu_backward: grad_out shape");
  return Tensor4<Scalar>(input.shape(),
                         (input.data().array() > Scalar(0)).select(grad_out.data(), Scalar(0)));
}

/// Per-element multipliers applied by inverted dropout: 0 for dropped
/// elements, 1 / keep_prob for kept ones. All ones in infer mode.
template <typename Scalar>
struct DropoutMask {
  Tensor4<Scalar> mask;
  Scalar keep_prob = 1;
  std::uint64_t seed = 0;
};

template <typename Scalar>
DropoutMask<Scalar> make_dropout_mask(const Shape4& shape, Scalar keep_prob, Mode mode,
                                      std::uint64_t seed) {
  if (!(keep_prob > 0 && keep_prob <= 1)) {
    throw ValidationError("dropout: keep_prob must lie in (0, 1]");
  }
  DropoutMask<Scalar> m{Tensor4<Scalar>(shape, Scalar(1)), keep_prob, seed};
  if (mode == Mode::infer || keep_prob == 1) return m;
  std::mt19937_64 rng(seed);
  const Scalar kept = Scalar(1) / keep_prob;
  const double threshold = static_cast<double>(keep_prob);
  for (Index i = 0; i < m.mask.size(); ++i) {
    // 53-bit uniform in [0, 1); independent of the standard library's
    // distribution implementations.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m.mask.data()[i] = u < threshold ? kept : Scalar(0);
  }
  return m;
}

template <typename Scalar>
std::pair<Tensor4<Scalar>, DropoutMask<Scalar>> dropout(const Tensor4<Scalar>& input,
                                                        Scalar keep_prob, Mode mode,
                                                        std::uint64_t seed) {
  DropoutMask<Scalar> m = make_dropout_mask(input.shape(), keep_prob, mode, seed);
  Tensor4<Scalar> out(input.shape(), input.data().cwiseProduct(m.mask.data()));
  return {std::move(out), std::move(m)};
}

template <typename Scalar>
Tensor4<Scalar> dropout_backward(const DropoutMask<Scalar>& mask, const Tensor4<Scalar>& grad_out) {
  if (grad_out.shape() != mask.mask.shape()) throw ShapeError("dropout_backward: grad_out shape");
  return Tensor4<Scalar>(grad_out.shape(), grad_out.data().cwiseProduct(mask.mask.data()));
}

}  // namespace densiscope
