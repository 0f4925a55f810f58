#pragma once
// Reference implementations used only by tests. They are written as plain
// loops on purpose and share no code with the library kernels they check.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "densiscope/nn/tensor.hpp"

namespace densiscope::testing {

template <typename Scalar>
Tensor4<Scalar> random_tensor(const Shape4& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor4<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = Scalar(u(rng));
  return t;
}

// Direct convolution with explicit "same"/"valid" offsets.
template <typename Scalar>
Tensor4<Scalar> naive_conv2d(const Tensor4<Scalar>& x, const Tensor4<Scalar>& w,
                             const Vector<Scalar>& b, Index stride, bool same) {
  const Index k = w.height();
  Index oh, ow, pt = 0, pl = 0;
  if (same) {
    oh = (x.height() + stride - 1) / stride;
    ow = (x.width() + stride - 1) / stride;
    const Index ph = std::max<Index>((oh - 1) * stride + k - x.height(), 0);
    const Index pw = std::max<Index>((ow - 1) * stride + k - x.width(), 0);
    pt = ph / 2;
    pl = pw / 2;
  } else {
    oh = (x.height() - k) / stride + 1;
    ow = (x.width() - k) / stride + 1;
  }
  Tensor4<Scalar> y(Shape4{x.batch(), w.batch(), oh, ow});
  for (Index n = 0; n < x.batch(); ++n)
    for (Index o = 0; o < w.batch(); ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = b[o];
          for (Index c = 0; c < x.channels(); ++c)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = i * stride + ky - pt;
                const Index ix = j * stride + kx - pl;
                if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
                acc += double(x(n, c, iy, ix)) * double(w(o, c, ky, kx));
              }
          y(n, o, i, j) = Scalar(acc);
        }
  return y;
}

template <typename Scalar>
RowMatrix<Scalar> naive_matmul(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  RowMatrix<Scalar> c(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      double acc = 0;
      for (Index k = 0; k < a.cols(); ++k) acc += double(a(i, k)) * double(b(k, j));
      c(i, j) = Scalar(acc);
    }
  return c;
}

// Central differences of a scalar function over every entry of `values`.
template <typename Scalar>
std::vector<double> central_differences(Scalar* values, Index count, double h,
                                        const std::function<double()>& f) {
  std::vector<double> g(count);
  for (Index i = 0; i < count; ++i) {
    const Scalar saved = values[i];
    values[i] = Scalar(double(saved) + h);
    const double up = f();
    values[i] = Scalar(double(saved) - h);
    const double down = f();
    values[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||b||, tiny)
template <typename Scalar>
double relative_error(const Scalar* analytic, const std::vector<double>& numeric) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double d = double(analytic[i]) - numeric[i];
    num += d * d;
    den += numeric[i] * numeric[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

template <typename Scalar>
double weighted_sum(const Tensor4<Scalar>& t, const Tensor4<Scalar>& r) {
  double acc = 0;
  for (Index i = 0; i < t.size(); ++i) acc += double(t.data()[i]) * double(r.data()[i]);
  return acc;
}

}  // namespace densiscope::testing
