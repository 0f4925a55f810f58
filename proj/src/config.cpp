#include "densiscope/config.hpp"

#include <fstream>
#include <sstream>

namespace densiscope {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Range, lo, hi)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhantomParams, height, width, slices_per_patient,
                                                breast_radius_y, breast_radius_x, chest_wall_x,
                                                chest_wall_slope, density, density_shape,
                                                slice_density_jitter, blob_count, blob_scale,
                                                texture_amplitude, fat_intensity, fgt_intensity,
                                                muscle_intensity, air_intensity, bias_strength,
                                                noise_sigma)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, batch_size, learning_rate,
                                                target_floor, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttributionConfig, background_count, seed,
                                                max_slices, write_csv)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AcceptanceThresholds, min_rho, max_p,
                                                completeness_rel, completeness_abs,
                                                region_error_band, region_min_fraction,
                                                outside_inside_ratio)

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"input_size", s.input_size},       {"in_channels", s.in_channels},
                     {"conv_channels", s.conv_channels}, {"dense_widths", s.dense_widths},
                     {"conv_dropout", s.conv_dropout},   {"dense_dropout", s.dense_dropout}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  const ModelSpec d;
  s.input_size = j.value("input_size", d.input_size);
  s.in_channels = j.value("in_channels", d.in_channels);
  s.conv_channels = j.value("conv_channels", d.conv_channels);
  s.dense_widths = j.value("dense_widths", d.dense_widths);
  s.conv_dropout = j.value("conv_dropout", d.conv_dropout);
  s.dense_dropout = j.value("dense_dropout", d.dense_dropout);
}

namespace {

void split_to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{{"train", s.train}, {"val", s.val}, {"test", s.test}, {"seed", s.seed}};
}

// Seeds not given in the file are offsets of the global seed.
std::uint64_t derived(std::uint64_t global, std::uint64_t stream) {
  return global * 0x9E3779B97F4A7C15ull + stream;
}

}  // namespace

void RunConfig::validate() const {
  if (patients < 1) throw ValidationError("config: patients must be >= 1");
  if (slices_per_patient < 1) throw ValidationError("config: slices_per_patient must be >= 1");
  if (permutations < 1) throw ValidationError("config: permutations must be >= 1");
  if (image_size != model.input_size) {
    throw ValidationError("config: image_size must equal model.input_size");
  }
  if (attribution.background_count < 1) {
    throw ValidationError("config: attribution.background_count must be >= 1");
  }
  if (attribution.max_slices < 0) throw ValidationError("config: attribution.max_slices < 0");
  phantom.validate();
  split.validate();
  model.validate();
  train.validate();
}

// Every key of `given` must name a field of `known`, recursively.
static void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& known,
                                const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw ValidationError("config: unknown field '" + prefix + key + "'");
    if (value.is_object() && known.at(key).is_object()) {
      reject_unknown_keys(value, known.at(key), prefix + key + ".");
    }
  }
}

RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  reject_unknown_keys(j, to_json(RunConfig{}), "");

  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.patients = j.value("patients", c.patients);
    c.slices_per_patient = j.value("slices_per_patient", c.slices_per_patient);
    c.permutations = j.value("permutations", c.permutations);
    c.image_size = j.value("image_size", c.image_size);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("phantom")) c.phantom = j.at("phantom").get<PhantomParams>();
    if (j.contains("model")) c.model = j.at("model").get<ModelSpec>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("attribution")) c.attribution = j.at("attribution").get<AttributionConfig>();
    if (j.contains("acceptance")) c.acceptance = j.at("acceptance").get<AcceptanceThresholds>();
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split.train = s.value("train", c.split.train);
      c.split.val = s.value("val", c.split.val);
      c.split.test = s.value("test", c.split.test);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }

  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.patients) c.patients = *overrides.patients;
  if (overrides.epochs) c.train.epochs = *overrides.epochs;
  if (overrides.out) c.output_dir = *overrides.out;

  auto seed_at = [&](const nlohmann::json& obj, const char* key, std::uint64_t stream) {
    if (obj.is_object() && obj.contains(key) && !obj.at(key).is_null()) {
      return obj.at(key).get<std::uint64_t>();
    }
    return derived(c.seed, stream);
  };
  const nlohmann::json none = nlohmann::json::object();
  c.data_seed = seed_at(j, "data_seed", 1);
  c.split.seed = seed_at(j.contains("split") ? j.at("split") : none, "seed", 2);
  c.model_seed = seed_at(j, "model_seed", 3);
  c.train.seed = seed_at(j.contains("train") ? j.at("train") : none, "seed", 4);
  c.attribution.seed = seed_at(j.contains("attribution") ? j.at("attribution") : none, "seed", 5);
  c.eval_seed = seed_at(j, "eval_seed", 6);
  c.phantom.slices_per_patient = c.slices_per_patient;
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json split;
  split_to_json(split, c.split);
  return nlohmann::json{{"seed", c.seed},
                        {"patients", c.patients},
                        {"slices_per_patient", c.slices_per_patient},
                        {"data_seed", c.data_seed},
                        {"model_seed", c.model_seed},
                        {"eval_seed", c.eval_seed},
                        {"permutations", c.permutations},
                        {"image_size", c.image_size},
                        {"output_dir", c.output_dir},
                        {"phantom", c.phantom},
                        {"split", split},
                        {"model", c.model},
                        {"train", c.train},
                        {"attribution", c.attribution},
                        {"acceptance", c.acceptance}};
}

}  // namespace densiscope
