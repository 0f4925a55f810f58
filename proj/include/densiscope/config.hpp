#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "densiscope/model.hpp"
#include "densiscope/phantom.hpp"
#include "densiscope/preprocess.hpp"

namespace densiscope {

struct AttributionConfig {
  int background_count = 100;
  std::uint64_t seed = 0;
  int max_slices = 0;      // explain at most this many test slices; 0 = all
  bool write_csv = false;  // also write (row, col, value) CSV per map
};

/// Pass/fail thresholds printed by `reproduce`.
struct AcceptanceThresholds {
  double min_rho = 0.85;
  double max_p = 0.001;
  double completeness_rel = 1e-3;
  double completeness_abs = 1e-5;
  double region_error_band = 0.05;
  double region_min_fraction = 0.80;
  double outside_inside_ratio = 0.25;
};

/// Everything a run needs. Seeds that the file leaves out are derived from
/// the global seed when the configuration is loaded, so a loaded config
/// always carries every seed explicitly.
struct RunConfig {
  std::uint64_t seed = 0;
  int patients = 506;
  int slices_per_patient = 20;
  std::uint64_t data_seed = 0;
  std::uint64_t model_seed = 0;
  std::uint64_t eval_seed = 0;
  int permutations = 10000;
  Index image_size = 128;
  PhantomParams phantom;
  SplitSpec split{350.0 / 506.0, 75.0 / 506.0, 81.0 / 506.0, 0};
  ModelSpec model;
  TrainConfig train;
  AttributionConfig attribution;
  AcceptanceThresholds acceptance;
  std::string output_dir = "densiscope_run";

  void validate() const;
};

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> patients;
  std::optional<int> epochs;
  std::optional<std::string> out;
};

/// Parses JSON text, applies overrides, then fills in derived seeds.
RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

nlohmann::json to_json(const RunConfig& config);

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

}  // namespace densiscope
