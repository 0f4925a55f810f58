#include "densiscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"

namespace densiscope {
namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("spearman: vectors differ in length");
  if (x.size() < 3) throw ValidationError("spearman: at least 3 observations are required");
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) {
    throw ValidationError("spearman: correlation undefined for a constant vector");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::vector<double> mid_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const auto rx = mid_ranks(x);
  const auto ry = mid_ranks(y);
  return pearson(rx, ry);
}

double permutation_p_value(std::span<const double> x, std::span<const double> y, int n_perm,
                           std::uint64_t seed) {
  check_pair(x, y);
  if (n_perm < 1) throw ValidationError("permutation_p_value: n_perm must be >= 1");
  const auto rx = mid_ranks(x);
  auto ry = mid_ranks(y);
  const double observed = std::abs(pearson(rx, ry));
  // Ranks are invariant under permutation, so permuting the ranks of y is the
  // same as permuting y and re-ranking. A small slack absorbs round-off when
  // a permutation ties the observed statistic exactly.
  const double threshold = observed - 1e-12;
  std::mt19937_64 rng(seed);
  int extreme = 0;
  for (int i = 0; i < n_perm; ++i) {
    std::shuffle(ry.begin(), ry.end(), rng);
    if (std::abs(pearson(rx, ry)) >= threshold) ++extreme;
  }
  return double(1 + extreme) / double(n_perm + 1);
}

RegionStats region_shap_summary(const Eigen::ArrayXXd& shap, const Mask& breast_mask,
                                const Mask& fgt_mask) {
  if (shap.rows() != breast_mask.rows() || shap.cols() != breast_mask.cols() ||
      fgt_mask.rows() != breast_mask.rows() || fgt_mask.cols() != breast_mask.cols()) {
    throw ShapeError("region_shap_summary: map and mask dimensions differ");
  }
  double fgt = 0, fat = 0, inside = 0, outside = 0;
  long n_fgt = 0, n_fat = 0, n_in = 0, n_out = 0;
  for (Eigen::Index y = 0; y < shap.rows(); ++y) {
    for (Eigen::Index x = 0; x < shap.cols(); ++x) {
      const double v = shap(y, x);
      if (breast_mask(y, x)) {
        inside += std::abs(v);
        ++n_in;
        if (fgt_mask(y, x)) {
          fgt += v;
          ++n_fgt;
        } else {
          fat += v;
          ++n_fat;
        }
      } else {
        if (fgt_mask(y, x)) {
          throw ValidationError("region_shap_summary: FGT pixel outside the breast mask");
        }
        outside += std::abs(v);
        ++n_out;
      }
    }
  }
  RegionStats s;
  if (n_fgt) s.fgt_mean = fgt / double(n_fgt);
  if (n_fat) s.fat_mean = fat / double(n_fat);
  if (n_in) s.inside_abs_mean = inside / double(n_in);
  if (n_out) s.outside_abs_mean = outside / double(n_out);
  return s;
}

EvalReport evaluate(std::vector<SliceResult> slices, int n_perm, std::uint64_t seed) {
  if (slices.empty()) throw ValidationError("evaluate: no predictions");
  std::sort(slices.begin(), slices.end(), [](const SliceResult& a, const SliceResult& b) {
    return std::tie(a.patient_id, a.slice_index) < std::tie(b.patient_id, b.slice_index);
  });
  EvalReport r;
  std::map<int, PatientResult> by_patient;
  for (const auto& s : slices) {
    auto& p = by_patient[s.patient_id];
    p.patient_id = s.patient_id;
    p.truth += s.truth;
    p.prediction += s.prediction;
    ++p.n_slices;
  }
  for (auto& [pid, p] : by_patient) {
    p.truth /= p.n_slices;
    p.prediction /= p.n_slices;
    r.patients.push_back(p);
  }
  r.slices = std::move(slices);
  r.n_patients = int(r.patients.size());

  std::vector<double> t, q;
  for (const auto& p : r.patients) {
    t.push_back(p.truth);
    q.push_back(p.prediction);
  }
  check_pair(t, q);
  auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(q)) {
    r.constant_predictions = true;
    return r;
  }
  r.spearman_rho = spearman_rho(t, q);
  r.p_value = permutation_p_value(t, q, n_perm, seed);
  t.clear();
  q.clear();
  for (const auto& s : r.slices) {
    t.push_back(s.truth);
    q.push_back(s.prediction);
  }
  r.slice_spearman_rho = spearman_rho(t, q);
  r.slice_p_value = permutation_p_value(t, q, n_perm, seed + 1);
  return r;
}

void scatter_report(const EvalReport& report, const std::filesystem::path& path) {
  if (report.patients.empty()) throw ValidationError("scatter_report: empty report");
  std::ostringstream os;
  os << "patient_id,truth,prediction,n_slices\n";
  for (const auto& p : report.patients) {
    os << p.patient_id << ',' << fmt9(p.truth) << ',' << fmt9(p.prediction) << ',' << p.n_slices
       << '\n';
  }
  os << "#summary," << fmt9(report.spearman_rho) << ',' << fmt9(report.p_value) << ','
     << report.n_patients << '\n';
  io::write_file(path, os.str());
}

void write_slice_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "patient_id,slice_index,truth,prediction,abs_error\n";
  for (const auto& s : report.slices) {
    os << s.patient_id << ',' << s.slice_index << ',' << fmt9(s.truth) << ','
       << fmt9(s.prediction) << ',' << fmt9(s.abs_error()) << '\n';
  }
  io::write_file(path, os.str());
}

}  // namespace densiscope
