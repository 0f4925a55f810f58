#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "densiscope/image.hpp"

namespace densiscope {

/// Mid-ranks (1-based; tied values share the average of their positions).
std::vector<double> mid_ranks(std::span<const double> values);

/// Spearman's rho: Pearson correlation of mid-ranks. Requires equal lengths
/// >= 3; throws ValidationError when either side has zero rank variance.
double spearman_rho(std::span<const double> x, std::span<const double> y);

/// Two-sided permutation test on rho:
///   p = (1 + #{|rho_perm| >= |rho_obs|}) / (n_perm + 1).
double permutation_p_value(std::span<const double> x, std::span<const double> y, int n_perm,
                           std::uint64_t seed);

struct RegionStats {
  std::optional<double> fgt_mean;            // mean SHAP over FGT pixels
  std::optional<double> fat_mean;            // mean SHAP over breast minus FGT
  std::optional<double> inside_abs_mean;     // mean |SHAP| inside the breast
  std::optional<double> outside_abs_mean;    // mean |SHAP| outside the breast
  int patient_id = 0;
  int slice_index = 0;
};

/// Region means of a SHAP map; a region without pixels reports no value.
RegionStats region_shap_summary(const Eigen::ArrayXXd& shap, const Mask& breast_mask,
                                const Mask& fgt_mask);

struct SliceResult {
  int patient_id = 0;
  int slice_index = 0;
  double truth = 0;
  double prediction = 0;
  double abs_error() const { return std::abs(prediction - truth); }
};

struct PatientResult {
  int patient_id = 0;
  double truth = 0;       // mean over the patient's slices
  double prediction = 0;  // mean over the patient's slices
  int n_slices = 0;
};

struct EvalReport {
  std::vector<SliceResult> slices;
  std::vector<PatientResult> patients;  // sorted by patient_id
  double spearman_rho = 0;              // per patient
  double p_value = 1;
  double slice_spearman_rho = 0;
  double slice_p_value = 1;
  int n_patients = 0;
  bool constant_predictions = false;  // rho reported as 0 and p as 1
};

/// Aggregates slices per patient and computes both correlations. A constant
/// prediction vector has no rank correlation; it is scored as rho = 0, p = 1.
EvalReport evaluate(std::vector<SliceResult> slices, int n_perm, std::uint64_t seed);

/// Per-patient CSV (patient_id,truth,prediction,n_slices) sorted by patient,
/// then a summary row (#summary,rho,p_value,n_patients). Floats use 9
/// significant digits.
void scatter_report(const EvalReport& report, const std::filesystem::path& path);

/// Per-slice CSV: patient_id,slice_index,truth,prediction,abs_error.
void write_slice_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace densiscope
