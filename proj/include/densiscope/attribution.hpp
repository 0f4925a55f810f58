#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "densiscope/image.hpp"
#include "densiscope/model.hpp"
#include "densiscope/nn/network.hpp"

namespace densiscope {

/// Reference inputs for Deep SHAP, drawn from the training split.
struct BackgroundSet {
  std::vector<Image> slices;
  std::vector<std::size_t> indices;  // positions in the training dataset
  std::uint64_t seed = 0;
  std::string id;  // "bg-<seed>-<count>"

  std::size_t size() const { return slices.size(); }
};

/// `count` distinct training slices chosen uniformly without replacement.
BackgroundSet sample_background(const Dataset& train_set, std::size_t count, std::uint64_t seed);

/// Per-pixel SHAP values explaining the raw (unclamped) model output.
struct ShapMap {
  Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> values;
  std::string input_id;
  std::string background_id;
  std::uint32_t model_checksum = 0;
  double prediction = 0;       // f(x)
  double background_mean = 0;  // E_b[f(b)]
};

/// Pre-activation deltas below this use the local gradient instead of the
/// rescale ratio.
inline constexpr double kRescaleDelta = 1e-7;

/// A network reduced to the operations the multiplier rules cover: affine
/// maps (conv with any following batch norm folded in, dense, standalone
/// batch norm) and ReLU. Dropout is the identity in inference mode and is
/// dropped. Built only from inference-mode networks.
class AttributionNet {
 public:
  /// Throws ValidationError if mode is train.
  AttributionNet(const Network<double>& network, Mode mode);
  AttributionNet(const Network<float>& network, Mode mode);

  /// Raw outputs for a batch, shape (N, 1, 1, 1) for the density model.
  Tensor4d forward(const Tensor4d& x) const;

  /// DeepLIFT attributions of x (batch 1) against each reference in refs
  /// (batch K), returned as a (K, C, H, W) tensor. Each reference's
  /// attributions sum to f(x) - f(ref) up to rounding.
  Tensor4d multipliers_times_delta(const Tensor4d& x, const Tensor4d& refs) const;

  std::size_t op_count() const { return ops_.size(); }

  struct Affine {
    enum class Kind { conv, dense, channel_scale } kind;
    Conv2dParams<double> conv;
    DenseParams<double> dense;
    Vector<double> scale, shift;  // channel_scale
  };
  struct Rectifier {};

 private:
  std::vector<std::variant<Affine, Rectifier>> ops_;
};

/// Attributions of `input` against one reference (same shape, batch 1).
Tensor4d deeplift_multipliers(const AttributionNet& net, const Tensor4d& input,
                              const Tensor4d& reference);

/// Mean over references of the per-reference attributions, plus f(x) and
/// E_b[f(b)]. References are processed in chunks; the reduction order is
/// fixed so results do not depend on the worker count.
ShapMap deep_shap(const AttributionNet& net, const Tensor4d& input, const Tensor4d& background);
ShapMap deep_shap(const AttributionNet& net, const Image& input, const BackgroundSet& background);

/// Brute-force Shapley values of the first output for every input element,
/// with absent features replaced by the reference value and the game averaged
/// over references. At most 12 features.
Vector<double> exact_shapley_oracle(const AttributionNet& net, const Tensor4d& input,
                                    const Tensor4d& background);

/// Diverging red/blue overlay (symmetric scale at the 99th percentile of
/// |values|) composited at 50% over the grayscale slice, written as binary PPM.
void export_shap_overlay(const Image& slice, const ShapMap& map, const std::filesystem::path& path);

/// Binary ShapMap: magic "DSHP", u32 version, u32 rows, u32 cols, u32-length
/// input id and background id, u32 model checksum, f64 f(x), f64 E[f],
/// row-major f32 values.
void write_shap_map(const ShapMap& map, const std::filesystem::path& path);
ShapMap read_shap_map(const std::filesystem::path& path);

/// CSV with header row,col,value.
void write_shap_csv(const ShapMap& map, const std::filesystem::path& path);

/// Stacks images into an (N, 1, H, W) double tensor.
Tensor4d to_tensor(const std::vector<Image>& images);
Tensor4d to_tensor(const Image& image);

}  // namespace densiscope
