#include <zlib.h>

#include <sstream>

#include "binary_io.hpp"
#include "densiscope/config.hpp"
#include "densiscope/model.hpp"

namespace densiscope {
namespace {

constexpr char kMagic[4] = {'D', 'N', 'S', 'W'};
constexpr std::uint32_t kVersion = 1;
enum DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::span<float> values;
};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename Derived>
std::span<float> span_of(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

std::vector<std::uint64_t> dims_of(const Shape4& s) {
  return {std::uint64_t(s.n), std::uint64_t(s.c), std::uint64_t(s.h), std::uint64_t(s.w)};
}

// Parameters and batch-norm running statistics in a fixed order.
std::vector<TensorRecord> model_tensors(Network<float>& net) {
  std::vector<TensorRecord> out;
  for (auto& layer : net.layers) {
    std::visit(overloaded{
                   [&](Conv2dLayer<float>& l) {
                     out.push_back({l.name + ".weight", dims_of(l.params.weight.shape()),
                                    span_of(l.params.weight.data())});
                     out.push_back({l.name + ".bias", {std::uint64_t(l.params.bias.size())},
                                    span_of(l.params.bias)});
                   },
                   [&](BatchNormLayer<float>& l) {
                     const std::vector<std::uint64_t> d{std::uint64_t(l.params.channels())};
                     out.push_back({l.name + ".gamma", d, span_of(l.params.gamma)});
                     out.push_back({l.name + ".beta", d, span_of(l.params.beta)});
                     out.push_back({l.name + ".running_mean", d, span_of(l.params.running_mean)});
                     out.push_back({l.name + ".running_var", d, span_of(l.params.running_var)});
                   },
                   [&](DenseLayer<float>& l) {
                     out.push_back({l.name + ".weight",
                                    {std::uint64_t(l.params.weight.rows()),
                                     std::uint64_t(l.params.weight.cols())},
                                    span_of(l.params.weight)});
                     out.push_back({l.name + ".bias", {std::uint64_t(l.params.bias.size())},
                                    span_of(l.params.bias)});
                   },
                   [](auto&) {},
               },
               layer);
  }
  return out;
}

// Adam moments, one pair per learnable tensor, when the optimizer has state.
std::vector<TensorRecord> adam_tensors(ModelState& m) {
  std::vector<TensorRecord> out;
  if (m.adam.m.empty()) return out;
  const auto views = m.network.learnable();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::vector<std::uint64_t> d{std::uint64_t(views[i].values.size())};
    out.push_back({"adam.m." + views[i].name, d, span_of(m.adam.m[i])});
  }
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::vector<std::uint64_t> d{std::uint64_t(views[i].values.size())};
    out.push_back({"adam.v." + views[i].name, d, span_of(m.adam.v[i])});
  }
  return out;
}

std::string metadata(const ModelState& m) {
  std::ostringstream rng;
  rng << m.rng;
  const nlohmann::json j{{"format", "densiscope-weights"},
                         {"spec", m.spec},
                         {"seed", m.seed},
                         {"epoch", m.epoch},
                         {"adam",
                          {{"step", m.adam.step},
                           {"beta1", double(m.adam.beta1)},
                           {"beta2", double(m.adam.beta2)},
                           {"epsilon", double(m.adam.epsilon)},
                           {"learning_rate", double(m.adam.learning_rate)}}},
                         {"rng", rng.str()}};
  return j.dump();
}

}  // namespace

void save_weights(const ModelState& model, const std::filesystem::path& path) {
  ModelState m = model;
  io::ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  const std::string meta = metadata(m);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_string(meta);

  auto records = model_tensors(m.network);
  auto adam = adam_tensors(m);
  records.insert(records.end(), adam.begin(), adam.end());
  for (const auto& r : records) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.put_string(r.name);
    w.put<std::uint8_t>(kFloat32);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.put<std::uint64_t>(d);
    w.put_bytes(r.values.data(), r.values.size_bytes());
  }
  const auto& bytes = w.bytes();
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size());
  io::ByteWriter trailer;
  trailer.put<std::uint32_t>(crc);

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::vector<std::uint8_t> out = bytes;
  out.insert(out.end(), trailer.bytes().begin(), trailer.bytes().end());
  io::write_file(path, out.data(), out.size());
}

std::uint32_t weights_checksum(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 4) throw IoError(path.string() + ": truncated weights file");
  return crc32_of(bytes.data(), bytes.size() - 4);
}

ModelState load_weights(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 16) throw IoError(what + ": truncated weights file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError(what + ": not a weights file");

  io::ByteReader r(bytes.data(), bytes.size() - 4, what);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw IoError(what + ": unsupported weights format version " + std::to_string(version));
  }
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != crc32_of(bytes.data(), bytes.size() - 4)) {
    throw IoError(what + ": checksum mismatch (file corrupted or truncated)");
  }

  const auto meta_len = r.get<std::uint32_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.get_string(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": bad metadata: " + e.what());
  }

  ModelState m = build_model(meta.at("spec").get<ModelSpec>(), meta.at("seed").get<std::uint64_t>());
  m.epoch = meta.at("epoch").get<int>();
  const auto& adam = meta.at("adam");
  m.adam.step = adam.at("step").get<std::int64_t>();
  m.adam.beta1 = static_cast<float>(adam.at("beta1").get<double>());
  m.adam.beta2 = static_cast<float>(adam.at("beta2").get<double>());
  m.adam.epsilon = static_cast<float>(adam.at("epsilon").get<double>());
  m.adam.learning_rate = static_cast<float>(adam.at("learning_rate").get<double>());
  std::istringstream rng(meta.at("rng").get<std::string>());
  rng >> m.rng;
  if (!rng) throw IoError(what + ": bad RNG state");

  if (m.adam.step > 0) {
    for (const auto& v : m.network.learnable()) {
      m.adam.m.push_back(Vector<float>::Zero(Index(v.values.size())));
      m.adam.v.push_back(Vector<float>::Zero(Index(v.values.size())));
    }
  }
  auto records = model_tensors(m.network);
  auto adam_records = adam_tensors(m);
  records.insert(records.end(), adam_records.begin(), adam_records.end());

  std::size_t next = 0;
  while (r.remaining() > 0) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name = r.get_string(name_len);
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::uint64_t> dims(rank);
    for (auto& d : dims) d = r.get<std::uint64_t>();
    if (next >= records.size() || records[next].name != name) {
      throw IoError(what + ": unexpected tensor '" + name + "'");
    }
    auto& rec = records[next++];
    if (dtype != kFloat32 || dims != rec.dims) {
      throw IoError(what + ": tensor '" + name + "' has the wrong type or shape");
    }
    std::memcpy(rec.values.data(), r.take(rec.values.size_bytes()), rec.values.size_bytes());
  }
  if (next != records.size()) throw IoError(what + ": missing tensors");
  return m;
}

}  // namespace densiscope
