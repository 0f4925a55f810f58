#include "densiscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "densiscope/nn/loss.hpp"

namespace densiscope {

void ModelSpec::validate() const {
  if (conv_channels.size() != kConvBlocks) {
    throw ValidationError("model spec: exactly " + std::to_string(kConvBlocks) +
                          " conv blocks are required, got " +
                          std::to_string(conv_channels.size()));
  }
  if (dense_widths.size() != kDenseLayers) {
    throw ValidationError("model spec: exactly " + std::to_string(kDenseLayers) +
                          " dense layers are required");
  }
  for (Index c : conv_channels) {
    if (c < 1) throw ValidationError("model spec: conv channels must be positive");
  }
  for (Index w : dense_widths) {
    if (w < 1) throw ValidationError("model spec: dense widths must be positive");
  }
  if (in_channels < 1) throw ValidationError("model spec: in_channels must be positive");
  if (!(conv_dropout >= 0 && conv_dropout < 1 && dense_dropout >= 0 && dense_dropout < 1)) {
    throw ValidationError("model spec: dropout rates must lie in [0, 1)");
  }
  if (input_size < 1 || final_spatial() < 1) {
    throw ValidationError("model spec: input size does not reach a positive spatial size");
  }
}

Index ModelSpec::final_spatial() const {
  Index s = input_size;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    s = ConvGeometry::make(s, s, 3, kStride, Padding::same).out_h;
  }
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (batch_size < 2) throw ValidationError("train config: batch_size must be >= 2");
  if (!(learning_rate > 0)) throw ValidationError("train config: learning_rate must be positive");
  if (!(target_floor > 0)) throw ValidationError("train config: target_floor must be positive");
}

namespace {

// He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <typename Derived>
void he_uniform(Eigen::DenseBase<Derived>& values, Index fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (Index i = 0; i < values.size(); ++i) values(i) = static_cast<float>(u(rng));
}

void check_inputs(const ModelSpec& spec, const Dataset& data) {
  for (const auto& s : data.samples) {
    if (s.image.rows() != spec.input_size || s.image.cols() != spec.input_size) {
      throw ShapeError("model expects " + std::to_string(spec.input_size) + "x" +
                       std::to_string(spec.input_size) + " inputs, got " +
                       std::to_string(s.image.rows()) + "x" + std::to_string(s.image.cols()));
    }
  }
}

Vector<float> targets(const Dataset& data, const std::vector<std::size_t>& order,
                      std::size_t first, std::size_t count) {
  Vector<float> t(static_cast<Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    t[Index(i)] = static_cast<float>(data.samples[order[first + i]].density);
  }
  return t;
}

}  // namespace

ModelState build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState m;
  m.spec = spec;
  m.seed = seed;
  m.rng.seed(seed);
  std::mt19937_64 init(seed ^ 0x5eedba5e11ull);

  auto& layers = m.network.layers;
  Index in = spec.in_channels;
  for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
    const std::string id = std::to_string(i + 1);
    const Index out = spec.conv_channels[i];
    Conv2dParams<float> conv;
    conv.weight = Tensor4f(Shape4{out, in, 3, 3});
    he_uniform(conv.weight.data(), in * 9, init);
    conv.bias = Vector<float>::Zero(out);
    conv.stride = ModelSpec::kStride;
    conv.padding = Padding::same;
    layers.push_back(Conv2dLayer<float>{"conv" + id, std::move(conv)});
    layers.push_back(BatchNormLayer<float>{"bn" + id, BatchNormParams<float>::identity(out)});
    layers.push_back(ReluLayer{"relu" + id});
    if (spec.conv_dropout > 0) {
      layers.push_back(DropoutLayer<float>{"drop" + id, float(1.0 - spec.conv_dropout)});
    }
    in = out;
  }
  Index features = in * spec.final_spatial() * spec.final_spatial();
  for (std::size_t i = 0; i < spec.dense_widths.size(); ++i) {
    const std::string id = std::to_string(i + 1);
    DenseParams<float> d{RowMatrix<float>(features, spec.dense_widths[i]),
                         Vector<float>::Zero(spec.dense_widths[i])};
    he_uniform(d.weight, features, init);
    layers.push_back(DenseLayer<float>{"dense" + id, std::move(d)});
    layers.push_back(ReluLayer{"dense_relu" + id});
    if (spec.dense_dropout > 0) {
      layers.push_back(DropoutLayer<float>{"dense_drop" + id, float(1.0 - spec.dense_dropout)});
    }
    features = spec.dense_widths[i];
  }
  // The linear head starts at zero. With He scaling the initial outputs are
  // large enough that the first Adam steps kill every dense ReLU and the net
  // collapses to a constant.
  DenseParams<float> head{RowMatrix<float>::Zero(features, 1), Vector<float>::Zero(1)};
  layers.push_back(DenseLayer<float>{"output", std::move(head)});
  return m;
}

Tensor4f stack_images(const Dataset& data, std::size_t first, std::size_t count) {
  if (first + count > data.size()) throw ValidationError("stack_images: range out of bounds");
  const Index h = count ? data.samples[first].image.rows() : 0;
  const Index w = count ? data.samples[first].image.cols() : 0;
  Tensor4f x(Shape4{Index(count), 1, h, w});
  for (std::size_t i = 0; i < count; ++i) {
    const Image& img = data.samples[first + i].image;
    if (img.rows() != h || img.cols() != w) throw ShapeError("stack_images: mixed image sizes");
    std::copy_n(img.data(), h * w, x.data().data() + Index(i) * h * w);
  }
  return x;
}

Vector<float> predict_raw(const ModelState& model, const Dataset& data) {
  check_inputs(model.spec, data);
  constexpr std::size_t kChunk = 64;
  Vector<float> out(Index(data.size()));
  for (std::size_t first = 0; first < data.size(); first += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - first);
    const Tensor4f y = model.network.forward(stack_images(data, first, n));
    out.segment(Index(first), Index(n)) = y.data();
  }
  return out;
}

std::vector<double> predict(const ModelState& model, const Dataset& data) {
  const Vector<float> raw = predict_raw(model, data);
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(double(raw[Index(i)]), 0.0, 1.0);
  }
  return out;
}

TrainResult train(ModelState& model, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty() || val_set.empty()) {
    throw ValidationError("train: training and validation sets must be non-empty");
  }
  check_inputs(model.spec, train_set);
  check_inputs(model.spec, val_set);
  model.adam.learning_rate = static_cast<float>(config.learning_rate);

  // Shuffling and dropout draw from a stream seeded by the config so that a
  // rerun with the same seed and data reproduces the weights bit for bit.
  // When resuming, the stream continues from the saved model state.
  if (model.epoch == 0) model.rng.seed(config.seed);

  Vector<float> val_targets(Index(val_set.size()));
  for (std::size_t i = 0; i < val_set.size(); ++i) {
    val_targets[Index(i)] = static_cast<float>(val_set.samples[i].density);
  }
  const float floor = static_cast<float>(config.target_floor);

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  const std::size_t batch = std::size_t(config.batch_size);
  for (int e = 0; e < config.epochs; ++e) {
    const int epoch = model.epoch + 1;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), model.rng);

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t first = 0, b = 0; first < order.size(); first += batch, ++b) {
      const std::size_t n = std::min(batch, order.size() - first);
      Tensor4f x(Shape4{Index(n), 1, model.spec.input_size, model.spec.input_size});
      const Index plane = model.spec.input_size * model.spec.input_size;
      for (std::size_t i = 0; i < n; ++i) {
        const Image& img = train_set.samples[order[first + i]].image;
        std::copy_n(img.data(), plane, x.data().data() + Index(i) * plane);
      }
      auto trace = model.network.forward_train(x, model.rng);
      const auto loss = mape_loss<float>(trace.output.data(), targets(train_set, order, first, n),
                                         floor);
      if (!std::isfinite(loss.loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(b + 1));
      }
      const auto grads = model.network.backward(trace, Tensor4f(trace.output.shape(), loss.grad));
      auto slots = model.network.slots(grads);
      adam_step<float>(model.adam, slots);
      loss_sum += double(loss.loss) * double(n);
      seen += n;
    }

    model.epoch = epoch;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(seen);
    rec.val_loss = mape_loss<float>(predict_raw(model, val_set), val_targets, floor).loss;
    if (!std::isfinite(rec.val_loss)) {
      throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      result.best_val = model;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace densiscope
