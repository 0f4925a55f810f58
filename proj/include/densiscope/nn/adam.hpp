#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

/// A learnable parameter and its gradient, both viewed as flat arrays.
template <typename Scalar>
struct ParamSlot {
  std::string name;
  std::span<Scalar> value;
  std::span<const Scalar> grad;
};

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Vector<Scalar>> m;
  std::vector<Vector<Scalar>> v;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  Scalar learning_rate = Scalar(0.001);
};

/// Bias-corrected Adam update. Moment buffers are allocated on first use and
/// must keep mirroring the parameter sizes afterwards.
template <typename Scalar>
void adam_step(AdamState<Scalar>& state, std::span<const ParamSlot<Scalar>> params) {
  for (const auto& p : params) {
    if (p.grad.size() != p.value.size()) {
      throw ShapeError("adam_step: gradient size mismatch for " + p.name);
    }
    for (Scalar g : p.grad) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in " + p.name + " at step " +
                           std::to_string(state.step + 1));
      }
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Vector<Scalar>::Zero(static_cast<Index>(p.value.size())));
      state.v.push_back(Vector<Scalar>::Zero(static_cast<Index>(p.value.size())));
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }

  ++state.step;
  const Scalar bc1 = Scalar(1) - std::pow(state.beta1, Scalar(state.step));
  const Scalar bc2 = Scalar(1) - std::pow(state.beta2, Scalar(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const Index n = static_cast<Index>(p.value.size());
    if (state.m[i].size() != n) throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    Eigen::Map<Vector<Scalar>> value(p.value.data(), n);
    Eigen::Map<const Vector<Scalar>> grad(p.grad.data(), n);
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = state.beta1 * m + (1 - state.beta1) * grad;
    v = state.beta2 * v + (1 - state.beta2) * grad.cwiseAbs2();
    value.array() -= state.learning_rate * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + state.epsilon);
  }
}

}  // namespace densiscope
