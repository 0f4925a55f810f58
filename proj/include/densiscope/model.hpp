#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "densiscope/nn/network.hpp"
#include "densiscope/preprocess.hpp"

namespace densiscope {

/// Architecture of the density regressor: five conv blocks
/// (3x3 conv, stride 2, same padding -> batch norm -> ReLU -> dropout),
/// two ReLU dense layers with dropout, and one linear output node.
struct ModelSpec {
  Index input_size = 128;
  Index in_channels = 1;
  std::vector<Index> conv_channels{32, 64, 128, 128, 128};
  std::vector<Index> dense_widths{256, 64};
  double conv_dropout = 0.5;   // drop probability after each conv block
  double dense_dropout = 0.5;  // drop probability after each hidden dense layer

  static constexpr std::size_t kConvBlocks = 5;
  static constexpr std::size_t kDenseLayers = 2;
  static constexpr Index kStride = 2;

  void validate() const;
  /// Side length of the feature map entering the dense layers.
  Index final_spatial() const;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 100;
  double learning_rate = 0.001;
  double target_floor = 0.01;  // MAPE denominator floor
  std::uint64_t seed = 0;      // shuffling and dropout

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;  // mean training-mode MAPE over the epoch's batches
  double val_loss = 0;    // inference-mode MAPE on the validation split
};

struct ModelState {
  ModelSpec spec;
  std::uint64_t seed = 0;
  Network<float> network;
  AdamState<float> adam;
  int epoch = 0;
  std::mt19937_64 rng;
};

/// He-uniform conv and hidden dense weights, zero output weights, zero biases,
/// batch norm gamma = 1, beta = 0.
ModelState build_model(const ModelSpec& spec, std::uint64_t seed);

struct TrainResult {
  std::vector<EpochRecord> history;
  std::optional<ModelState> best_val;  // snapshot with the lowest validation loss
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs config.epochs epochs of shuffled mini-batch MAPE + Adam, continuing
/// the model's epoch counter. The model is left in its final-epoch state.
TrainResult train(ModelState& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Images [first, first + count) stacked as an (count, 1, H, W) tensor.
Tensor4f stack_images(const Dataset& data, std::size_t first, std::size_t count);

/// Raw linear outputs in inference mode.
Vector<float> predict_raw(const ModelState& model, const Dataset& data);

/// Inference-mode densities clamped to [0, 1]; one per sample.
std::vector<double> predict(const ModelState& model, const Dataset& data);

/// Binary weights file: magic "DNSW", u32 version, u32 metadata length,
/// UTF-8 JSON metadata, tensor records, trailing CRC-32.
void save_weights(const ModelState& model, const std::filesystem::path& path);
ModelState load_weights(const std::filesystem::path& path);

/// CRC-32 (IEEE) of the file contents minus the trailing checksum.
std::uint32_t weights_checksum(const std::filesystem::path& path);

}  // namespace densiscope
