#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "densiscope/errors.hpp"
#include "densiscope/image.hpp"

namespace densiscope {

struct Range {
  double lo = 0;
  double hi = 0;
};

/// Controls for the synthetic sagittal breast slices. Geometric quantities are
/// fractions of the image size; intensities are arbitrary units before
/// normalization. The defaults mimic T1-weighted contrast (fat bright,
/// fibroglandular tissue dark).
struct PhantomParams {
  Eigen::Index height = 128;
  Eigen::Index width = 128;
  int slices_per_patient = 20;

  Range breast_radius_y{0.28, 0.40};  // semi-axis along the cranio-caudal direction
  Range breast_radius_x{0.38, 0.62};  // protrusion from the chest wall
  Range chest_wall_x{0.10, 0.20};
  Range chest_wall_slope{-0.20, 0.20};

  // Patient density = lo + (hi - lo) * Beta(density_shape.lo, density_shape.hi).
  // The default Beta(2, 4) peaks near a quarter of the range and keeps almost
  // fully fatty breasts rare.
  Range density{0.0, 0.6};
  Range density_shape{2.0, 4.0};
  double slice_density_jitter = 0.03;  // per-slice half-width around the patient value

  Range blob_count{6, 14};
  Range blob_scale{0.10, 0.28};  // Gaussian sigma, fraction of the breast radii
  double texture_amplitude = 0.35;

  double fat_intensity = 1.0;
  double fgt_intensity = 0.45;
  double muscle_intensity = 0.30;
  double air_intensity = 0.03;

  double bias_strength = 0.2;
  double noise_sigma = 0.03;

  /// Throws ValidationError when a range is empty or the tissue intensities
  /// are not ordered fat > fgt > muscle > air.
  void validate() const;
};

struct PhantomSlice {
  Image image;
  Mask breast_mask;
  Mask fgt_mask;
  double density = 0;  // |fgt_mask| / |breast_mask|
  int patient_id = 0;
  int slice_index = 0;
};

/// Deterministic in (seed, patient_id, slice_index). Anatomy that belongs to
/// the patient (breast size, chest wall, density regime, gland layout) comes
/// from a per-patient stream; the slice adds its own small variation.
PhantomSlice generate_slice(std::uint64_t seed, int patient_id, int slice_index,
                            const PhantomParams& params);

/// Patients are numbered 0..n_patients-1, slices 0..slices_per_patient-1.
std::vector<PhantomSlice> generate_dataset(std::uint64_t seed, int n_patients,
                                           int slices_per_patient, PhantomParams params);

/// Multiplies by 1 + strength * g, where g in [-1, 1] is a coarse random grid
/// upsampled bilinearly.
Image apply_bias_field(const Image& image, std::uint64_t seed, double strength);

/// Writes images (raw little-endian float32), masks (binary PGM) and
/// manifest.csv into `dir`.
void write_dataset(const std::filesystem::path& dir, const std::vector<PhantomSlice>& slices);
std::vector<PhantomSlice> read_dataset(const std::filesystem::path& dir);

}  // namespace densiscope
