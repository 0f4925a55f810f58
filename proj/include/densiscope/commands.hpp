#pragma once

#include <cmath>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "densiscope/config.hpp"
#include "densiscope/metrics.hpp"

namespace densiscope {

/// File locations inside an experiment directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path config_source() const { return root / "config.source.json"; }
  std::filesystem::path overrides() const { return root / "overrides.json"; }
  std::filesystem::path version() const { return root / "VERSION"; }
  std::filesystem::path stages() const { return root / "stages.done"; }
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path splits() const { return root / "splits.csv"; }
  std::filesystem::path weights() const { return root / "model" / "weights.dnsw"; }
  std::filesystem::path best_val_weights() const { return root / "model" / "best_val.dnsw"; }
  std::filesystem::path history() const { return root / "model" / "history.csv"; }
  std::filesystem::path predictions() const { return root / "predictions.csv"; }
  std::filesystem::path shap_dir() const { return root / "shap"; }
  std::filesystem::path shap_summary() const { return root / "shap" / "summary.csv"; }
  std::filesystem::path scatter() const { return root / "report" / "scatter.csv"; }
  std::filesystem::path slice_report() const { return root / "report" / "slices.csv"; }
  std::filesystem::path region_stats() const { return root / "report" / "region_stats.csv"; }
  std::filesystem::path metrics() const { return root / "report" / "metrics.json"; }
};

/// Loaded configuration plus what it was built from: the verbatim file text
/// and the command-line overrides, both echoed into the run.
struct Invocation {
  RunConfig config;
  std::string source_text;
  ConfigOverrides overrides;

  RunLayout layout() const { return RunLayout{config.output_dir}; }
};

/// One explained slice, as recorded in shap/summary.csv.
struct ExplainRecord {
  std::string input_id;
  int patient_id = 0;
  int slice_index = 0;
  double truth = 0;
  double prediction = 0;       // raw model output f(x)
  double background_mean = 0;  // E_b[f(b)]
  double shap_sum = 0;
  RegionStats regions;

  double completeness_error() const { return std::abs(shap_sum - (prediction - background_mean)); }
};

/// Headline numbers of a finished run and their verdicts.
struct RunSummary {
  EvalReport eval;
  std::vector<ExplainRecord> explained;
  double worst_completeness_excess = 0;  // max of |err| - tolerance over explained slices
  int region_eligible = 0;               // accurate slices with non-empty FGT
  int region_sign_ok = 0;
  double outside_inside_ratio = 0;       // mean over eligible slices

  bool rho_pass(const AcceptanceThresholds& t) const;
  bool completeness_pass() const { return !explained.empty() && worst_completeness_excess <= 0; }
  bool region_sign_pass(const AcceptanceThresholds& t) const;
  bool region_ratio_pass(const AcceptanceThresholds& t) const;
};

/// Generates the phantom cohort and the patient split.
void cmd_generate(const Invocation& inv, std::ostream& log);
/// Trains (or resumes training of) the model on the generated cohort.
void cmd_train(const Invocation& inv, std::ostream& log);
/// Writes predictions.csv for the test split.
void cmd_predict(const Invocation& inv, std::ostream& log);
/// Writes one ShapMap and one overlay per selected test slice.
void cmd_explain(const Invocation& inv, std::ostream& log);
/// Correlation, scatter and region reports; returns the summary.
RunSummary cmd_evaluate(const Invocation& inv, std::ostream& log);
/// All stages in order, skipping those already recorded as done, then the
/// verdict table. With dry_run only the plan is printed.
RunSummary cmd_reproduce(const Invocation& inv, bool dry_run, std::ostream& log);

/// Prints one PASS/FAIL line per threshold.
void print_verdicts(const RunSummary& summary, const AcceptanceThresholds& t, std::ostream& os);

/// Full command-line entry point; returns the process exit code
/// (0 ok, 2 validation, 3 runtime/numeric, 4 I/O).
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace densiscope
