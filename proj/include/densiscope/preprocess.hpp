#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "densiscope/image.hpp"
#include "densiscope/phantom.hpp"

namespace densiscope {

/// Percentile of `values` with linear interpolation between order statistics
/// (q in [0, 1]). `values` must be non-empty.
double percentile(std::span<const float> values, double q);

/// Maps the 2.5th..97.5th percentile range onto [0, 1] and clips outside it.
/// A constant image maps to all zeros.
Image percentile_normalize(const Image& image);

struct SlabWindow {
  Eigen::Index first = 0;
  Eigen::Index count = 0;
};

/// Window of `n_slices` contiguous slices centred on `centroid`, shifted to
/// stay inside [0, n_total).
SlabWindow slab_window(Eigen::Index n_total, double centroid, Eigen::Index n_slices);

/// Selects `n_slices` contiguous slices centred on the breast-mask centroid
/// along the slice axis.
SlabWindow extract_slab(std::span<const Mask> breast_masks, Eigen::Index n_slices);

/// Corner-aligned bilinear resampling.
Image resize_bilinear(const Image& image, Eigen::Index out_h, Eigen::Index out_w);

/// Nearest-neighbour resampling for masks, with the same corner alignment.
Mask resize_nearest(const Mask& mask, Eigen::Index out_h, Eigen::Index out_w);

/// |fgt| / |breast|. Throws ValidationError on an empty breast mask or an FGT
/// pixel outside the breast.
double compute_density(const Mask& breast_mask, const Mask& fgt_mask);

enum class SplitTag { train, val, test, all };

std::string to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& s);

struct Sample {
  Image image;  // normalized, out_size x out_size
  double density = 0;
  int patient_id = 0;
  int slice_index = 0;
  Mask breast_mask;  // resampled to the image grid, for region statistics
  Mask fgt_mask;
};

struct Dataset {
  std::vector<Sample> samples;
  SplitTag tag = SplitTag::all;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::vector<int> patient_ids() const;  // sorted, unique
};

/// Normalization, slab selection per patient and resize of phantom slices.
/// The density label comes from the native-resolution masks.
Dataset prepare_dataset(const std::vector<PhantomSlice>& slices, Eigen::Index out_size = 128,
                        Eigen::Index slab_slices = 20);

struct SplitSpec {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Patient counts per split from fractions by largest-remainder rounding.
std::array<std::size_t, 3> split_counts(std::size_t n_patients, const SplitSpec& spec);

/// Shuffles patient ids with spec.seed and partitions them; every slice of a
/// patient lands in the same split.
Splits split_by_patient(const Dataset& dataset, const SplitSpec& spec);

/// CSV with columns patient_id,split_tag.
void write_split_manifest(const std::filesystem::path& path, const Splits& splits);

}  // namespace densiscope
