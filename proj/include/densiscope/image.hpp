#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace densiscope {

/// Single-channel 2-D image, row-major so data() is the raster order.
using Image = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary mask with values 0 or 1.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Index count(const Mask& m) { return (m != 0).count(); }

}  // namespace densiscope
