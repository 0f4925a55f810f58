#pragma once

#include <algorithm>
#include <cmath>

#include "densiscope/nn/tensor.hpp"

namespace densiscope {

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  Vector<Scalar> grad;  // d loss / d pred
};

/// Mean absolute percentage error, in percent:
///   (100 / N) * sum |pred - target| / max(target, target_floor).
/// The subgradient at pred == target is 0.
template <typename Scalar>
LossResult<Scalar> mape_loss(const Vector<Scalar>& pred, const Vector<Scalar>& target,
                             Scalar target_floor = Scalar(0.01)) {
  if (pred.size() != target.size() || pred.size() == 0) {
    throw ShapeError("mape_loss: pred and target must be non-empty and equally long");
  }
  if (!(target_floor > 0)) throw ValidationError("mape_loss: target_floor must be positive");
  const Index n = pred.size();
  const Scalar scale = Scalar(100) / Scalar(n);
  LossResult<Scalar> r{Scalar(0), Vector<Scalar>(n)};
  for (Index i = 0; i < n; ++i) {
    const Scalar denom = std::max(target[i], target_floor);
    const Scalar diff = pred[i] - target[i];
    r.loss += std::abs(diff) / denom;
    const Scalar sign = diff > 0 ? Scalar(1) : (diff < 0 ? Scalar(-1) : Scalar(0));
    r.grad[i] = scale * sign / denom;
  }
  r.loss *= scale;
  return r;
}

}  // namespace densiscope
