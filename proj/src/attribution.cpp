#include "densiscope/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "densiscope/parallel.hpp"
#include "densiscope/preprocess.hpp"

namespace densiscope {

namespace {

constexpr char kShapMagic[4] = {'D', 'S', 'H', 'P'};
constexpr std::uint32_t kShapVersion = 1;
constexpr Index kChunk = 25;  // references per propagation pass

Conv2dParams<double> fold_into(Conv2dParams<double> conv, const BatchNormParams<double>& bn) {
  if (bn.channels() != conv.out_channels()) {
    throw ShapeError("attribution: batch norm width does not match the preceding conv");
  }
  const auto [scale, shift] = bn.folded();
  auto w = conv.weight.as_matrix();  // (OC, IC*k*k)
  for (Index oc = 0; oc < conv.out_channels(); ++oc) w.row(oc) *= scale[oc];
  conv.bias = scale.cwiseProduct(conv.bias) + shift;
  return conv;
}

Tensor4d channel_affine(const Tensor4d& x, const Vector<double>& scale, const Vector<double>& shift) {
  Tensor4d out = x;
  for (Index n = 0; n < x.batch(); ++n) {
    auto p = out.planes(n);
    p.array().colwise() *= scale.array();
    p.array().colwise() += shift.array();
  }
  return out;
}

Tensor4d channel_scale_only(const Tensor4d& g, const Vector<double>& scale) {
  Tensor4d out = g;
  for (Index n = 0; n < g.batch(); ++n) out.planes(n).array().colwise() *= scale.array();
  return out;
}

}  // namespace

AttributionNet::AttributionNet(const Network<double>& network, Mode mode) {
  if (mode != Mode::infer) {
    throw ValidationError("attribution: the model must be in inference mode");
  }
  for (const auto& layer : network.layers) {
    std::visit(overloaded{
                   [&](const Conv2dLayer<double>& l) {
                     Affine a{Affine::Kind::conv, l.params, {}, {}, {}};
                     ops_.emplace_back(std::move(a));
                   },
                   [&](const BatchNormLayer<double>& l) {
                     auto* prev = ops_.empty() ? nullptr : std::get_if<Affine>(&ops_.back());
                     if (prev && prev->kind == Affine::Kind::conv) {
                       prev->conv = fold_into(prev->conv, l.params);
                     } else {
                       auto [scale, shift] = l.params.folded();
                       ops_.emplace_back(Affine{Affine::Kind::channel_scale, {}, {}, scale, shift});
                     }
                   },
                   [&](const ReluLayer&) { ops_.emplace_back(Rectifier{}); },
                   [&](const DropoutLayer<double>&) {},
                   [&](const DenseLayer<double>& l) {
                     ops_.emplace_back(Affine{Affine::Kind::dense, {}, l.params, {}, {}});
                   },
               },
               layer);
  }
}

AttributionNet::AttributionNet(const Network<float>& network, Mode mode)
    : AttributionNet(network.cast<double>(), mode) {}

namespace {

Tensor4d apply_affine(const AttributionNet::Affine& a, const Tensor4d& x) {
  switch (a.kind) {
    case AttributionNet::Affine::Kind::conv: return conv2d(x, a.conv);
    case AttributionNet::Affine::Kind::dense: return dense(x, a.dense);
    case AttributionNet::Affine::Kind::channel_scale: return channel_affine(x, a.scale, a.shift);
  }
  return x;
}

}  // namespace

Tensor4d AttributionNet::forward(const Tensor4d& x) const {
  Tensor4d a = x;
  for (const auto& op : ops_) {
    if (const auto* aff = std::get_if<Affine>(&op)) {
      a = apply_affine(*aff, a);
    } else {
      a = relu(a);
    }
  }
  return a;
}

Tensor4d AttributionNet::multipliers_times_delta(const Tensor4d& x, const Tensor4d& refs) const {
  if (x.batch() != 1) throw ShapeError("attribution: input must be a single sample");
  if (refs.batch() < 1) throw ValidationError("attribution: empty reference set");
  if (Shape4{1, refs.channels(), refs.height(), refs.width()} != x.shape()) {
    throw ShapeError("attribution: reference shape " + to_string(refs.shape()) +
                     " does not match input " + to_string(x.shape()));
  }
  const Index k = refs.batch();

  // Forward both, keeping every op's inputs.
  std::vector<Tensor4d> xs, rs;
  xs.reserve(ops_.size());
  rs.reserve(ops_.size());
  Tensor4d xa = x, ra = refs;
  for (const auto& op : ops_) {
    xs.push_back(xa);
    rs.push_back(ra);
    if (const auto* aff = std::get_if<Affine>(&op)) {
      xa = apply_affine(*aff, xa);
      ra = apply_affine(*aff, ra);
    } else {
      xa = relu(xa);
      ra = relu(ra);
    }
  }
  if (xa.shape().sample_size() != 1) {
    throw ShapeError("attribution: the network must have a single output");
  }

  Tensor4d m(Shape4{k, 1, 1, 1});
  m.data().setOnes();
  m = m.reshaped(ra.shape());
  for (std::size_t i = ops_.size(); i-- > 0;) {
    if (const auto* aff = std::get_if<Affine>(&ops_[i])) {
      switch (aff->kind) {
        case Affine::Kind::conv: m = conv2d_backward_input(rs[i], aff->conv, m); break;
        case Affine::Kind::dense: m = dense_backward_input(rs[i].shape(), aff->dense, m); break;
        case Affine::Kind::channel_scale: m = channel_scale_only(m, aff->scale); break;
      }
      continue;
    }
    // Rescale rule.
    const auto xin = xs[i].as_matrix();  // 1 x D
    auto rin = rs[i].as_matrix();        // K x D
    auto mm = m.as_matrix();
    for (Index r = 0; r < k; ++r) {
      for (Index j = 0; j < xin.cols(); ++j) {
        const double xv = xin(0, j), rv = rin(r, j);
        const double dx = xv - rv;
        double mult;
        if (std::abs(dx) > kRescaleDelta) {
          mult = (std::max(xv, 0.0) - std::max(rv, 0.0)) / dx;
        } else {
          mult = xv > 0 ? 1.0 : 0.0;
        }
        mm(r, j) *= mult;
      }
    }
  }

  auto out = m.as_matrix();
  const auto xin = x.as_matrix();
  const auto rin = refs.as_matrix();
  for (Index r = 0; r < k; ++r) out.row(r).array() *= (xin.row(0) - rin.row(r)).array();
  return m;
}

Tensor4d deeplift_multipliers(const AttributionNet& net, const Tensor4d& input,
                              const Tensor4d& reference) {
  if (reference.batch() != 1) throw ShapeError("deeplift_multipliers: one reference expected");
  return net.multipliers_times_delta(input, reference);
}

ShapMap deep_shap(const AttributionNet& net, const Tensor4d& input, const Tensor4d& background) {
  if (background.batch() < 1) throw ValidationError("deep_shap: empty background set");
  if (input.batch() != 1) throw ShapeError("deep_shap: input must be a single sample");
  const Index k = background.batch();
  const std::size_t chunks = std::size_t((k + kChunk - 1) / kChunk);

  std::vector<Vector<double>> sums(chunks);
  std::vector<double> f_sums(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    const Index first = Index(c) * kChunk;
    const Index count = std::min(kChunk, k - first);
    const Tensor4d refs = background.slice_batch(first, count);
    const Tensor4d attr = net.multipliers_times_delta(input, refs);
    sums[c] = attr.as_matrix().colwise().sum().transpose();
    f_sums[c] = net.forward(refs).data().sum();
  });

  Vector<double> total = Vector<double>::Zero(input.shape().sample_size());
  double f_total = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += sums[c];
    f_total += f_sums[c];
  }
  total /= double(k);

  ShapMap map;
  const Index rows = input.channels() * input.height();
  map.values.resize(rows, input.width());
  std::copy(total.data(), total.data() + total.size(), map.values.data());
  map.prediction = net.forward(input).data()[0];
  map.background_mean = f_total / double(k);
  return map;
}

Tensor4d to_tensor(const std::vector<Image>& images) {
  if (images.empty()) return Tensor4d(Shape4{0, 1, 0, 0});
  const Index h = images.front().rows(), w = images.front().cols();
  Tensor4d t(Shape4{Index(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].rows() != h || images[i].cols() != w) {
      throw ShapeError("to_tensor: images differ in size");
    }
    const float* src = images[i].data();
    std::copy(src, src + h * w, t.data().data() + Index(i) * h * w);
  }
  return t;
}

Tensor4d to_tensor(const Image& image) { return to_tensor(std::vector<Image>{image}); }

ShapMap deep_shap(const AttributionNet& net, const Image& input, const BackgroundSet& background) {
  if (background.slices.empty()) throw ValidationError("deep_shap: empty background set");
  ShapMap map = deep_shap(net, to_tensor(input), to_tensor(background.slices));
  map.background_id = background.id;
  return map;
}

BackgroundSet sample_background(const Dataset& train_set, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ValidationError("sample_background: count must be positive");
  if (count > train_set.size()) {
    throw ValidationError("sample_background: requested " + std::to_string(count) +
                          " slices from a training split of " + std::to_string(train_set.size()));
  }
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  BackgroundSet bg;
  bg.indices.assign(order.begin(), order.begin() + std::ptrdiff_t(count));
  for (std::size_t i : bg.indices) bg.slices.push_back(train_set.samples[i].image);
  bg.seed = seed;
  bg.id = "bg-" + std::to_string(seed) + "-" + std::to_string(count);
  return bg;
}

Vector<double> exact_shapley_oracle(const AttributionNet& net, const Tensor4d& input,
                                    const Tensor4d& background) {
  const Index n = input.shape().sample_size();
  if (input.batch() != 1) throw ShapeError("exact_shapley_oracle: input must be a single sample");
  if (n > 12) {
    throw ValidationError("exact_shapley_oracle: " + std::to_string(n) +
                          " features exceed the enumeration limit of 12");
  }
  if (background.batch() < 1) throw ValidationError("exact_shapley_oracle: empty background");
  const Index k = background.batch();
  const Index subsets = Index(1) << n;

  Tensor4d batch(Shape4{subsets * k, input.channels(), input.height(), input.width()});
  auto rows = batch.as_matrix();
  const auto x = input.as_matrix();
  const auto refs = background.as_matrix();
  for (Index s = 0; s < subsets; ++s) {
    for (Index r = 0; r < k; ++r) {
      for (Index j = 0; j < n; ++j) rows(s * k + r, j) = (s >> j) & 1 ? x(0, j) : refs(r, j);
    }
  }
  const Tensor4d out = net.forward(batch);
  if (out.shape().sample_size() != 1) throw ShapeError("exact_shapley_oracle: single output expected");
  std::vector<double> value(std::size_t(subsets), 0.0);
  for (Index s = 0; s < subsets; ++s) {
    for (Index r = 0; r < k; ++r) value[std::size_t(s)] += out.data()[s * k + r];
    value[std::size_t(s)] /= double(k);
  }

  std::vector<double> fact(std::size_t(n) + 1, 1.0);
  for (std::size_t i = 1; i < fact.size(); ++i) fact[i] = fact[i - 1] * double(i);
  Vector<double> phi = Vector<double>::Zero(n);
  for (Index s = 0; s < subsets; ++s) {
    const int size = std::popcount(std::uint64_t(s));
    for (Index i = 0; i < n; ++i) {
      if ((s >> i) & 1) continue;
      const double weight =
          fact[std::size_t(size)] * fact[std::size_t(n - size - 1)] / fact[std::size_t(n)];
      phi[i] += weight * (value[std::size_t(s | (Index(1) << i))] - value[std::size_t(s)]);
    }
  }
  return phi;
}

void export_shap_overlay(const Image& slice, const ShapMap& map, const std::filesystem::path& path) {
  if (slice.rows() != map.values.rows() || slice.cols() != map.values.cols()) {
    throw ShapeError("export_shap_overlay: slice and map sizes differ");
  }
  if (!map.values.allFinite()) throw NumericError("export_shap_overlay: non-finite SHAP values");
  std::vector<float> magnitudes(std::size_t(map.values.size()));
  for (Index i = 0; i < map.values.size(); ++i) {
    magnitudes[std::size_t(i)] = float(std::abs(map.values.data()[i]));
  }
  const double scale = percentile(magnitudes, 99.0);

  const std::string header = "P6\n" + std::to_string(slice.cols()) + " " +
                             std::to_string(slice.rows()) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  auto to_byte = [](double v) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
  };
  for (Index i = 0; i < slice.size(); ++i) {
    const double gray = std::clamp(double(slice.data()[i]), 0.0, 1.0);
    const double s = scale > 0 ? std::clamp(map.values.data()[i] / scale, -1.0, 1.0) : 0.0;
    const double red = s < 0 ? 1.0 + s : 1.0;
    const double blue = s > 0 ? 1.0 - s : 1.0;
    const double green = 1.0 - std::abs(s);
    bytes.push_back(to_byte(0.5 * red + 0.5 * gray));
    bytes.push_back(to_byte(0.5 * green + 0.5 * gray));
    bytes.push_back(to_byte(0.5 * blue + 0.5 * gray));
  }
  io::write_file(path, bytes.data(), bytes.size());
}

void write_shap_map(const ShapMap& map, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(kShapMagic, 4);
  w.put(kShapVersion);
  w.put(std::uint32_t(map.values.rows()));
  w.put(std::uint32_t(map.values.cols()));
  w.put(std::uint32_t(map.input_id.size()));
  w.put_string(map.input_id);
  w.put(std::uint32_t(map.background_id.size()));
  w.put_string(map.background_id);
  w.put(map.model_checksum);
  w.put(map.prediction);
  w.put(map.background_mean);
  for (Index i = 0; i < map.values.size(); ++i) w.put(float(map.values.data()[i]));
  io::write_file(path, w.bytes().data(), w.bytes().size());
}

ShapMap read_shap_map(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kShapMagic, 4) != 0) {
    throw IoError(what + ": not a SHAP map file");
  }
  io::ByteReader r(bytes.data(), bytes.size(), what);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kShapVersion) {
    throw IoError(what + ": unsupported SHAP map version " + std::to_string(version));
  }
  ShapMap map;
  const auto rows = r.get<std::uint32_t>();
  const auto cols = r.get<std::uint32_t>();
  map.input_id = r.get_string(r.get<std::uint32_t>());
  map.background_id = r.get_string(r.get<std::uint32_t>());
  map.model_checksum = r.get<std::uint32_t>();
  map.prediction = r.get<double>();
  map.background_mean = r.get<double>();
  map.values.resize(rows, cols);
  for (Index i = 0; i < map.values.size(); ++i) map.values.data()[i] = r.get<float>();
  if (r.remaining() != 0) throw IoError(what + ": trailing bytes after SHAP values");
  return map;
}

void write_shap_csv(const ShapMap& map, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "row,col,value\n";
  char buf[64];
  for (Index r = 0; r < map.values.rows(); ++r) {
    for (Index c = 0; c < map.values.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g\n", static_cast<long long>(r),
                    static_cast<long long>(c), map.values(r, c));
      os << buf;
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace densiscope
