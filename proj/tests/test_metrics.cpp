#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "densiscope/errors.hpp"
#include "densiscope/metrics.hpp"

using namespace densiscope;
namespace fs = std::filesystem;
using Eigen::Index;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("mid_ranks averages ties") {
  const std::vector<double> v{10, 20, 20, 5, 20};
  CHECK(mid_ranks(v) == std::vector<double>{2, 4, 4, 1, 4});
}

TEST_CASE("spearman_rho: monotone, hand-ranked, invalid inputs") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(spearman_rho(x, std::vector<double>{2, 4, 8, 16, 32}) == doctest::Approx(1.0));
  CHECK(spearman_rho(x, std::vector<double>{9, 7, 5, 3, 1}) == doctest::Approx(-1.0));

  // x ranks 1,2,3,4; y = [2,1,4,3] ranks 2,1,4,3; Pearson of the ranks by hand:
  // deviations (-1.5,-0.5,0.5,1.5) and (-0.5,-1.5,1.5,0.5), products sum to 3,
  // each sum of squares is 5, so rho = 3/5.
  const std::vector<double> a{1, 2, 3, 4}, b{2, 1, 4, 3};
  CHECK(spearman_rho(a, b) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(spearman_rho(a, b) == doctest::Approx(pearson({1, 2, 3, 4}, {2, 1, 4, 3})));

  CHECK_THROWS_AS(spearman_rho(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ValidationError);
  CHECK_THROWS_AS(spearman_rho(x, std::vector<double>{1, 2, 3}), ValidationError);
  CHECK_THROWS_AS(spearman_rho(x, std::vector<double>(5, 0.3)), ValidationError);
}

TEST_CASE("spearman_rho: monotone-transform invariance and symmetry") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(30), y(30);
    for (int i = 0; i < 30; ++i) {
      x[std::size_t(i)] = g(rng);
      y[std::size_t(i)] = 0.5 * x[std::size_t(i)] + g(rng);
    }
    const double rho = spearman_rho(x, y);
    CHECK(rho >= -1.0);
    CHECK(rho <= 1.0);
    CHECK(spearman_rho(y, x) == doctest::Approx(rho).epsilon(1e-14));
    std::vector<double> ex(x), affine(x), cube(y);
    for (auto& v : ex) v = std::exp(v);
    for (auto& v : affine) v = 3.0 * v + 7.0;
    for (auto& v : cube) v = v * v * v;
    CHECK(spearman_rho(ex, y) == doctest::Approx(rho).epsilon(1e-12));
    CHECK(spearman_rho(affine, y) == doctest::Approx(rho).epsilon(1e-12));
    CHECK(spearman_rho(x, cube) == doctest::Approx(rho).epsilon(1e-12));
  }
}

TEST_CASE("permutation_p_value: bounds, determinism, power and size") {
  std::vector<double> x(20), y(20);
  std::iota(x.begin(), x.end(), 0.0);
  for (std::size_t i = 0; i < 20; ++i) y[i] = std::sqrt(x[i]);
  const double p = permutation_p_value(x, y, 10000, 3);
  CHECK(p <= 0.001);
  CHECK(p > 0.0);
  CHECK(p == permutation_p_value(x, y, 10000, 3));

  // Duplicating monotone data never increases p.
  std::vector<double> x2(x), y2(y);
  x2.insert(x2.end(), x.begin(), x.end());
  y2.insert(y2.end(), y.begin(), y.end());
  CHECK(permutation_p_value(x2, y2, 10000, 3) <= p);

  // Under independence P(p > 0.05) is about 0.95, so 45 of 50 holds for
  // roughly 96% of data seeds.
  std::normal_distribution<double> g(0, 1);
  int above = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::mt19937_64 rng(std::uint64_t(1000 + trial));
    std::vector<double> a(25), b(25);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    const double q = permutation_p_value(a, b, 2000, std::uint64_t(trial));
    CHECK(q > 0.0);
    CHECK(q <= 1.0);
    above += q > 0.05;
  }
  CHECK(above >= 45);
}

TEST_CASE("region_shap_summary: constructed maps and a naive loop") {
  Mask breast = Mask::Zero(6, 6), fgt = Mask::Zero(6, 6);
  breast.block(1, 1, 4, 4).setOnes();
  fgt.block(2, 2, 2, 2).setOnes();
  Eigen::ArrayXXd map = Eigen::ArrayXXd::Zero(6, 6);
  for (Index r = 0; r < 6; ++r)
    for (Index c = 0; c < 6; ++c)
      if (fgt(r, c)) map(r, c) = 1.0;
      else if (breast(r, c)) map(r, c) = -1.0;
  auto s = region_shap_summary(map, breast, fgt);
  CHECK(*s.fgt_mean == 1.0);
  CHECK(*s.fat_mean == -1.0);
  CHECK(*s.inside_abs_mean == 1.0);
  CHECK(*s.outside_abs_mean == 0.0);

  s = region_shap_summary(Eigen::ArrayXXd::Zero(6, 6), breast, fgt);
  CHECK(*s.fgt_mean == 0.0);
  CHECK(*s.fat_mean == 0.0);
  CHECK(*s.inside_abs_mean == 0.0);
  CHECK(*s.outside_abs_mean == 0.0);

  // Empty FGT: statistic absent rather than zero.
  s = region_shap_summary(map, breast, Mask::Zero(6, 6));
  CHECK_FALSE(s.fgt_mean.has_value());
  CHECK(s.fat_mean.has_value());

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0, 1);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 10; ++trial) {
    Mask b = Mask::Zero(9, 7), f = Mask::Zero(9, 7);
    Eigen::ArrayXXd m(9, 7);
    for (Index i = 0; i < m.size(); ++i) {
      m.data()[i] = g(rng);
      b.data()[i] = coin(rng);
      f.data()[i] = b.data()[i] && coin(rng);
    }
    b(0, 0) = 1;
    f(0, 0) = 1;
    b(8, 6) = 0;
    f(8, 6) = 0;
    b(8, 5) = 1;
    f(8, 5) = 0;
    double sf = 0, sa = 0, si = 0, so = 0;
    int nf = 0, na = 0, ni = 0, no = 0;
    for (Index r = 0; r < 9; ++r) {
      for (Index c = 0; c < 7; ++c) {
        const double v = m(r, c);
        if (b(r, c)) {
          si += std::abs(v);
          ++ni;
          if (f(r, c)) {
            sf += v;
            ++nf;
          } else {
            sa += v;
            ++na;
          }
        } else {
          so += std::abs(v);
          ++no;
        }
      }
    }
    const auto st = region_shap_summary(m, b, f);
    CHECK(*st.fgt_mean == doctest::Approx(sf / nf).epsilon(1e-14));
    CHECK(*st.fat_mean == doctest::Approx(sa / na).epsilon(1e-14));
    CHECK(*st.inside_abs_mean == doctest::Approx(si / ni).epsilon(1e-14));
    CHECK(*st.outside_abs_mean == doctest::Approx(so / no).epsilon(1e-14));
  }

  CHECK_THROWS_AS(region_shap_summary(Eigen::ArrayXXd::Zero(5, 6), breast, fgt), ShapeError);
  Mask stray = fgt;
  stray(0, 0) = 1;
  CHECK_THROWS_AS(region_shap_summary(map, breast, stray), ValidationError);
}

TEST_CASE("evaluate aggregates per patient") {
  std::vector<SliceResult> slices;
  for (int p = 0; p < 5; ++p) {
    for (int s = 0; s < 4; ++s) {
      slices.push_back({p, s, 0.1 * p + 0.01 * s, 0.1 * p + 0.02 * s + 0.05});
    }
  }
  std::reverse(slices.begin(), slices.end());
  const auto r = evaluate(slices, 1000, 1);
  CHECK(r.n_patients == 5);
  REQUIRE(r.patients.size() == 5);
  for (int p = 0; p < 5; ++p) {
    CHECK(r.patients[std::size_t(p)].patient_id == p);
    CHECK(r.patients[std::size_t(p)].n_slices == 4);
    CHECK(r.patients[std::size_t(p)].truth == doctest::Approx(0.1 * p + 0.015));
    CHECK(r.patients[std::size_t(p)].prediction == doctest::Approx(0.1 * p + 0.08));
  }
  CHECK(r.spearman_rho == doctest::Approx(1.0));
  CHECK(r.slices.size() == 20);
  CHECK_THROWS_AS(evaluate({}, 1000, 1), ValidationError);

  for (auto& sl : slices) sl.prediction = 0.0;
  const auto flat = evaluate(slices, 1000, 1);
  CHECK(flat.constant_predictions);
  CHECK(flat.spearman_rho == 0.0);
  CHECK(flat.p_value == 1.0);
  CHECK(flat.patients.size() == 5);
  CHECK_THROWS_AS(evaluate({{1, 0, 0.1, 0.1}, {2, 0, 0.2, 0.3}}, 100, 1), ValidationError);
}

TEST_CASE("scatter_report: one row per patient plus a summary, deterministic") {
  std::vector<SliceResult> slices;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 0.6);
  for (int p = 0; p < 81; ++p) {
    const double t = u(rng);
    for (int s = 0; s < 3; ++s) slices.push_back({1000 - p, s, t, t + 0.05 * u(rng)});
  }
  const auto report = evaluate(slices, 500, 2);
  const fs::path dir = fs::temp_directory_path() / "densiscope_scatter";
  fs::create_directories(dir);
  scatter_report(report, dir / "a.csv");
  scatter_report(report, dir / "b.csv");
  const std::string text = slurp(dir / "a.csv");
  CHECK(text == slurp(dir / "b.csv"));

  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  CHECK(line == "patient_id,truth,prediction,n_slices");
  std::vector<std::string> rows;
  while (std::getline(is, line)) rows.push_back(line);
  REQUIRE(rows.size() == 82);
  CHECK(rows.front().rfind("920,", 0) == 0);  // sorted by patient id
  CHECK(rows.back().rfind("#summary,", 0) == 0);
  CHECK(rows.back().ends_with(",81"));

  write_slice_report(report, dir / "slices.csv");
  std::ifstream sl(dir / "slices.csv");
  std::getline(sl, line);
  CHECK(line == "patient_id,slice_index,truth,prediction,abs_error");

  CHECK_THROWS_AS(scatter_report(EvalReport{}, dir / "empty.csv"), ValidationError);
  CHECK_THROWS_AS(scatter_report(report, dir / "missing" / "x.csv"), IoError);
  fs::remove_all(dir);
}
