#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "densiscope/attribution.hpp"
#include "densiscope/parallel.hpp"
#include "densiscope/phantom.hpp"
#include "oracles.hpp"

using namespace densiscope;
namespace fs = std::filesystem;
using densiscope::testing::random_tensor;

namespace {

DenseLayer<double> dense_layer(std::string name, RowMatrix<double> w, Vector<double> b) {
  return DenseLayer<double>{std::move(name), DenseParams<double>{std::move(w), std::move(b)}};
}

DenseLayer<double> random_dense(Index in, Index out, std::mt19937_64& rng, double bias = 0.0) {
  std::uniform_real_distribution<double> u(-1, 1);
  RowMatrix<double> w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  Vector<double> b(out);
  for (Index i = 0; i < out; ++i) b[i] = bias + 0.1 * u(rng);
  return dense_layer("dense", w, b);
}

BatchNormLayer<double> random_bn(Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  auto p = BatchNormParams<double>::identity(c);
  for (Index i = 0; i < c; ++i) {
    p.gamma[i] = u(rng);
    p.beta[i] = u(rng) - 1.0;
    p.running_mean[i] = u(rng) - 1.0;
    p.running_var[i] = u(rng);
  }
  return BatchNormLayer<double>{"bn", p};
}

Conv2dLayer<double> random_conv(Index in, Index out, Index stride, std::mt19937_64& rng) {
  Conv2dParams<double> p;
  p.weight = random_tensor<double>(Shape4{out, in, 3, 3}, rng, -0.5, 0.5);
  p.bias = Vector<double>::Constant(out, 0.05);
  p.stride = stride;
  return Conv2dLayer<double>{"conv", p};
}

// A small network with every layer kind, BN running statistics perturbed so
// folding is exercised.
Network<double> small_cnn(std::mt19937_64& rng) {
  Network<double> n;
  n.layers.push_back(random_conv(1, 4, 2, rng));
  n.layers.push_back(random_bn(4, rng));
  n.layers.push_back(ReluLayer{"relu"});
  n.layers.push_back(DropoutLayer<double>{"drop", 0.5});
  n.layers.push_back(random_conv(4, 6, 2, rng));
  n.layers.push_back(random_bn(6, rng));
  n.layers.push_back(ReluLayer{"relu"});
  n.layers.push_back(random_dense(6 * 4 * 4, 8, rng));
  n.layers.push_back(ReluLayer{"relu"});
  n.layers.push_back(random_dense(8, 1, rng));
  return n;
}

double completeness_gap(double sum, double expected) {
  return std::abs(sum - expected) - (1e-3 * std::abs(expected) + 1e-5);
}

Dataset tiny_dataset(std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.image = Image::Constant(4, 4, float(i));
    s.patient_id = int(i);
    d.samples.push_back(s);
  }
  return d;
}

}  // namespace

TEST_CASE("sample_background: distinct, seeded, bounded") {
  const Dataset d = tiny_dataset(300);
  const auto a = sample_background(d, 100, 7);
  CHECK(a.size() == 100);
  CHECK(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size() == 100);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.slices[i](0, 0) == float(a.indices[i]));
  const auto b = sample_background(d, 100, 7);
  CHECK(a.indices == b.indices);
  CHECK(a.id == b.id);
  CHECK(sample_background(d, 100, 8).indices != a.indices);

  const auto all = sample_background(d, 300, 1);
  CHECK(std::set<std::size_t>(all.indices.begin(), all.indices.end()).size() == 300);
  CHECK_THROWS_AS(sample_background(d, 301, 1), ValidationError);
  CHECK_THROWS_AS(sample_background(d, 0, 1), ValidationError);
}

TEST_CASE("rescale rule: single ReLU unit") {
  Network<double> n;
  n.layers.push_back(dense_layer("in", RowMatrix<double>::Ones(1, 1), Vector<double>::Zero(1)));
  n.layers.push_back(ReluLayer{"relu"});
  n.layers.push_back(dense_layer("out", RowMatrix<double>::Ones(1, 1), Vector<double>::Zero(1)));
  const AttributionNet net(n, Mode::infer);
  Tensor4d x(Shape4{1, 1, 1, 1}), ref(Shape4{1, 1, 1, 1});
  x.data()[0] = 1.0;
  ref.data()[0] = -1.0;
  const auto attr = deeplift_multipliers(net, x, ref);
  // multiplier (1 - 0) / (1 - (-1)) = 0.5 times delta 2
  CHECK(attr.data()[0] / 2.0 == doctest::Approx(0.5).epsilon(1e-15));

  // Deltas below the threshold fall back to the local gradient.
  ref.data()[0] = 1.0 - 1e-9;
  CHECK(deeplift_multipliers(net, x, ref).data()[0] == doctest::Approx(1e-9).epsilon(1e-6));
}

TEST_CASE("input equal to the reference gives zero attributions") {
  std::mt19937_64 rng(1);
  const AttributionNet net(small_cnn(rng), Mode::infer);
  const auto x = random_tensor<double>(Shape4{1, 1, 16, 16}, rng, 0, 1);
  const auto attr = deeplift_multipliers(net, x, x);
  CHECK(attr.data().cwiseAbs().maxCoeff() == 0.0);
  const auto map = deep_shap(net, x, x);
  CHECK(map.values.abs().maxCoeff() == 0.0);
  CHECK(map.prediction == map.background_mean);
}

TEST_CASE("linear rule: affine three-input model") {
  RowMatrix<double> w(3, 1);
  w << 0.5, -2.0, 3.0;
  Network<double> n;
  n.layers.push_back(dense_layer("out", w, Vector<double>::Constant(1, 0.7)));
  const AttributionNet net(n, Mode::infer);
  Tensor4d x(Shape4{1, 3, 1, 1}), ref(Shape4{1, 3, 1, 1});
  x.data() << 1.0, 2.0, -1.0;
  ref.data() << 0.0, 0.5, 0.25;
  const auto attr = deeplift_multipliers(net, x, ref);
  for (Index i = 0; i < 3; ++i) {
    CHECK(attr.data()[i] == doctest::Approx(w(i, 0) * (x.data()[i] - ref.data()[i])));
  }
}

TEST_CASE("batch norm folding preserves the inference forward pass") {
  std::mt19937_64 rng(2);
  const Network<double> n = small_cnn(rng);
  const AttributionNet net(n, Mode::infer);
  CHECK(net.op_count() == 7);  // conv, relu, conv, relu, dense, relu, dense
  const auto x = random_tensor<double>(Shape4{5, 1, 16, 16}, rng, 0, 1);
  const auto a = n.forward(x);
  const auto b = net.forward(x);
  REQUIRE(a.shape() == b.shape());
  for (Index i = 0; i < a.size(); ++i) CHECK(b.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));
}

TEST_CASE("train mode is rejected") {
  std::mt19937_64 rng(3);
  CHECK_THROWS_AS(AttributionNet(small_cnn(rng), Mode::train), ValidationError);
}

TEST_CASE("completeness per reference and averaged") {
  std::mt19937_64 rng(4);
  const AttributionNet net(small_cnn(rng), Mode::infer);
  const auto x = random_tensor<double>(Shape4{1, 1, 16, 16}, rng, 0, 1);
  const auto bg = random_tensor<double>(Shape4{30, 1, 16, 16}, rng, 0, 1);
  const auto f_x = net.forward(x).data()[0];
  const auto f_bg = net.forward(bg);

  const auto per_ref = net.multipliers_times_delta(x, bg);
  for (Index r = 0; r < bg.batch(); ++r) {
    const double sum = per_ref.as_matrix().row(r).sum();
    CHECK(completeness_gap(sum, f_x - f_bg.data()[r]) <= 0);
  }

  const auto map = deep_shap(net, x, bg);
  CHECK(map.prediction == doctest::Approx(f_x).epsilon(1e-12));
  CHECK(map.background_mean == doctest::Approx(f_bg.data().mean()).epsilon(1e-12));
  CHECK(completeness_gap(map.values.sum(), map.prediction - map.background_mean) <= 0);
  CHECK(map.values.allFinite());

  // Chunked reduction agrees with a direct mean over all references.
  const Vector<double> direct = per_ref.as_matrix().colwise().mean().transpose();
  for (Index i = 0; i < direct.size(); ++i) {
    CHECK(map.values.data()[i] == doctest::Approx(direct[i]).epsilon(1e-9));
  }
}

TEST_CASE("null player: pixels equal in input and every reference get zero") {
  std::mt19937_64 rng(5);
  const AttributionNet net(small_cnn(rng), Mode::infer);
  auto x = random_tensor<double>(Shape4{1, 1, 16, 16}, rng, 0, 1);
  auto bg = random_tensor<double>(Shape4{3, 1, 16, 16}, rng, 0, 1);
  for (Index r = 0; r < 3; ++r) bg(r, 0, 4, 7) = x(0, 0, 4, 7) = 0.3;
  const auto per_ref = net.multipliers_times_delta(x, bg);
  for (Index r = 0; r < 3; ++r) CHECK(per_ref(r, 0, 4, 7) == 0.0);
}

TEST_CASE("exact Shapley oracle: closed-form games") {
  Network<double> identity;
  identity.layers.push_back(dense_layer("id", RowMatrix<double>::Ones(1, 1), Vector<double>::Zero(1)));
  const AttributionNet id_net(identity, Mode::infer);
  Tensor4d x(Shape4{1, 1, 1, 1});
  x.data()[0] = 0.8;
  Tensor4d refs(Shape4{3, 1, 1, 1});
  refs.data() << 0.1, 0.2, 0.6;
  CHECK(exact_shapley_oracle(id_net, x, refs)[0] == doctest::Approx(0.8 - 0.3));

  Network<double> sum;
  sum.layers.push_back(dense_layer("sum", RowMatrix<double>::Ones(2, 1), Vector<double>::Zero(1)));
  const AttributionNet sum_net(sum, Mode::infer);
  Tensor4d x2(Shape4{1, 2, 1, 1});
  x2.data() << 1.5, -0.25;
  const Tensor4d zero(Shape4{1, 2, 1, 1});
  const auto phi = exact_shapley_oracle(sum_net, x2, zero);
  CHECK(phi[0] == doctest::Approx(1.5));
  CHECK(phi[1] == doctest::Approx(-0.25));

  Network<double> wide;
  wide.layers.push_back(dense_layer("w", RowMatrix<double>::Ones(13, 1), Vector<double>::Zero(1)));
  CHECK_THROWS_AS(exact_shapley_oracle(AttributionNet(wide, Mode::infer), Tensor4d(Shape4{1, 13, 1, 1}),
                                       Tensor4d(Shape4{1, 13, 1, 1})),
                  ValidationError);
}

TEST_CASE("deep_shap equals exact Shapley values on random affine networks") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> features(1, 12), refs(1, 3), depth(1, 3);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = features(rng);
    Network<double> net;
    Index width = n;
    const int layers = depth(rng);
    for (int l = 0; l < layers; ++l) {
      const Index out = l + 1 == layers ? 1 : 1 + Index(rng() % 6);
      net.layers.push_back(random_dense(width, out, rng));
      if (l + 1 < layers && rng() % 2) net.layers.push_back(random_bn(out, rng));
      width = out;
    }
    const AttributionNet an(net, Mode::infer);
    const auto x = random_tensor<double>(Shape4{1, n, 1, 1}, rng);
    const auto bg = random_tensor<double>(Shape4{refs(rng), n, 1, 1}, rng);
    const auto exact = exact_shapley_oracle(an, x, bg);
    const auto map = deep_shap(an, x, bg);
    for (Index i = 0; i < n; ++i) CHECK(std::abs(map.values.data()[i] - exact[i]) < 1e-6);
  }
}

TEST_CASE("deep_shap equals exact Shapley values when no ReLU changes state") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Network<double> net;
    // Large positive biases keep every hidden unit active for inputs in [0, 1].
    net.layers.push_back(random_dense(6, 5, rng, 20.0));
    net.layers.push_back(ReluLayer{"relu"});
    net.layers.push_back(random_dense(5, 1, rng));
    const AttributionNet an(net, Mode::infer);
    const auto x = random_tensor<double>(Shape4{1, 6, 1, 1}, rng, 0, 1);
    const auto bg = random_tensor<double>(Shape4{3, 6, 1, 1}, rng, 0, 1);
    const auto exact = exact_shapley_oracle(an, x, bg);
    const auto map = deep_shap(an, x, bg);
    for (Index i = 0; i < 6; ++i) CHECK(std::abs(map.values.data()[i] - exact[i]) < 1e-6);
  }
}

TEST_CASE("nonlinear toy network: deep_shap and exact values share the same total") {
  std::mt19937_64 rng(8);
  Network<double> net;
  net.layers.push_back(random_dense(5, 4, rng));
  net.layers.push_back(ReluLayer{"relu"});
  net.layers.push_back(random_dense(4, 1, rng));
  const AttributionNet an(net, Mode::infer);
  const auto x = random_tensor<double>(Shape4{1, 5, 1, 1}, rng);
  const auto bg = random_tensor<double>(Shape4{2, 5, 1, 1}, rng);
  const auto exact = exact_shapley_oracle(an, x, bg);
  const auto map = deep_shap(an, x, bg);
  CHECK(map.values.sum() == doctest::Approx(exact.sum()).epsilon(1e-9));
  CHECK(exact.sum() == doctest::Approx(map.prediction - map.background_mean).epsilon(1e-9));
  double max_gap = 0;
  for (Index i = 0; i < 5; ++i) max_gap = std::max(max_gap, std::abs(map.values.data()[i] - exact[i]));
  MESSAGE("rescale-rule deviation from exact Shapley values: " << max_gap);
}

TEST_CASE("deep_shap rejects empty backgrounds and mismatched shapes") {
  std::mt19937_64 rng(9);
  const AttributionNet net(small_cnn(rng), Mode::infer);
  const auto x = random_tensor<double>(Shape4{1, 1, 16, 16}, rng, 0, 1);
  CHECK_THROWS_AS(deep_shap(net, x, Tensor4d(Shape4{0, 1, 16, 16})), ValidationError);
  CHECK_THROWS_AS(deep_shap(net, x, random_tensor<double>(Shape4{2, 1, 8, 8}, rng)), ShapeError);
  CHECK_THROWS_AS(deep_shap(net, Image(16, 16), BackgroundSet{}), ValidationError);
}

TEST_CASE("overlay export: neutral, symmetric, deterministic") {
  const fs::path dir = fs::temp_directory_path() / "densiscope_overlay";
  fs::create_directories(dir);
  Image slice(8, 8);
  for (Index i = 0; i < slice.size(); ++i) slice.data()[i] = float(i) / 63.0f;
  ShapMap map;
  map.values = decltype(map.values)::Zero(8, 8);
  export_shap_overlay(slice, map, dir / "zero.ppm");

  auto read = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
  };
  const std::string header = "P6\n8 8\n255\n";
  auto zero = read(dir / "zero.ppm");
  REQUIRE(zero.size() == header.size() + 3 * 64);
  CHECK(std::string(zero.begin(), zero.begin() + std::ptrdiff_t(header.size())) == header);
  for (Index i = 0; i < 64; ++i) {
    const std::size_t o = header.size() + 3 * std::size_t(i);
    const auto expected = std::uint8_t(std::lround(255.0 * (0.5 + 0.5 * slice.data()[i])));
    CHECK(zero[o] == expected);
    CHECK(zero[o + 1] == expected);
    CHECK(zero[o + 2] == expected);
  }

  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0, 1);
  for (Index i = 0; i < 64; ++i) map.values.data()[i] = g(rng);
  export_shap_overlay(slice, map, dir / "pos.ppm");
  export_shap_overlay(slice, map, dir / "pos_again.ppm");
  CHECK(read(dir / "pos.ppm") == read(dir / "pos_again.ppm"));
  ShapMap flipped = map;
  flipped.values = -map.values;
  export_shap_overlay(slice, flipped, dir / "neg.ppm");
  const auto pos = read(dir / "pos.ppm");
  const auto neg = read(dir / "neg.ppm");
  for (Index i = 0; i < 64; ++i) {
    const std::size_t o = header.size() + 3 * std::size_t(i);
    CHECK(pos[o] == neg[o + 2]);
    CHECK(pos[o + 1] == neg[o + 1]);
    CHECK(pos[o + 2] == neg[o]);
  }
  // The strongest positive pixel is red-dominant.
  Index hot;
  Index hot_col;
  map.values.maxCoeff(&hot, &hot_col);
  hot = hot * 8 + hot_col;
  const std::size_t o = header.size() + 3 * std::size_t(hot);
  CHECK(pos[o] > pos[o + 2]);

  CHECK_THROWS_AS(export_shap_overlay(slice, map, dir / "missing" / "x.ppm"), IoError);
  Image wrong(4, 4);
  CHECK_THROWS_AS(export_shap_overlay(wrong, map, dir / "w.ppm"), ShapeError);
  fs::remove_all(dir);
}

TEST_CASE("ShapMap files round-trip") {
  const fs::path dir = fs::temp_directory_path() / "densiscope_shapmap";
  fs::create_directories(dir);
  ShapMap map;
  map.values.resize(3, 5);
  for (Index i = 0; i < 15; ++i) map.values.data()[i] = double(float(0.1 * double(i) - 0.7));
  map.input_id = "p0003_s07";
  map.background_id = "bg-5-100";
  map.model_checksum = 0xdeadbeef;
  map.prediction = 0.31;
  map.background_mean = 0.22;
  write_shap_map(map, dir / "m.shap");
  const ShapMap back = read_shap_map(dir / "m.shap");
  CHECK((back.values == map.values).all());
  CHECK(back.input_id == map.input_id);
  CHECK(back.background_id == map.background_id);
  CHECK(back.model_checksum == map.model_checksum);
  CHECK(back.prediction == map.prediction);
  CHECK(back.background_mean == map.background_mean);
  CHECK(fs::file_size(dir / "m.shap") == 4 + 4 * 4 + 9 + 4 + 8 + 4 + 8 + 8 + 15 * 4);

  write_shap_csv(map, dir / "m.csv");
  std::ifstream is(dir / "m.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "row,col,value");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 15);

  std::ofstream(dir / "bad.shap") << "nope";
  CHECK_THROWS_AS(read_shap_map(dir / "bad.shap"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("deep_shap and phantom generation do not depend on the thread count") {
  std::mt19937_64 rng(21);
  const AttributionNet net(small_cnn(rng), Mode::infer);
  const auto x = random_tensor<double>(Shape4{1, 1, 16, 16}, rng, 0, 1);
  const auto bg = random_tensor<double>(Shape4{80, 1, 16, 16}, rng, 0, 1);  // four chunks
  PhantomParams p;
  p.height = p.width = 32;

  ::setenv("DENSISCOPE_THREADS", "1", 1);
  REQUIRE(worker_count() == 1);
  const ShapMap serial = deep_shap(net, x, bg);
  const auto phantoms_serial = generate_dataset(3, 4, 5, p);
  ::setenv("DENSISCOPE_THREADS", "4", 1);
  REQUIRE(worker_count() == 4);
  const ShapMap threaded = deep_shap(net, x, bg);
  const auto phantoms_threaded = generate_dataset(3, 4, 5, p);
  ::unsetenv("DENSISCOPE_THREADS");

  CHECK((serial.values == threaded.values).all());
  CHECK(serial.prediction == threaded.prediction);
  CHECK(serial.background_mean == threaded.background_mean);
  REQUIRE(phantoms_serial.size() == phantoms_threaded.size());
  for (std::size_t i = 0; i < phantoms_serial.size(); ++i) {
    CHECK((phantoms_serial[i].image == phantoms_threaded[i].image).all());
    CHECK((phantoms_serial[i].fgt_mask == phantoms_threaded[i].fgt_mask).all());
  }
}
