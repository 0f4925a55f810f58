#include "densiscope/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "densiscope/errors.hpp"

namespace densiscope {

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw ValidationError("percentile: empty input");
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = std::clamp(q, 0.0, 1.0) * double(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - double(lo);
  return double(sorted[lo]) + frac * (double(sorted[hi]) - double(sorted[lo]));
}

Image percentile_normalize(const Image& image) {
  if (image.size() == 0) throw ValidationError("percentile_normalize: empty image");
  const std::span<const float> values(image.data(), static_cast<std::size_t>(image.size()));
  const double lo = percentile(values, 0.025);
  const double hi = percentile(values, 0.975);
  if (!(hi > lo)) return Image::Zero(image.rows(), image.cols());
  return ((image.cast<double>() - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0).cast<float>();
}

SlabWindow slab_window(Eigen::Index n_total, double centroid, Eigen::Index n_slices) {
  if (n_slices < 1) throw ValidationError("extract_slab: n_slices must be >= 1");
  if (n_total < n_slices) {
    throw ValidationError("extract_slab: volume has " + std::to_string(n_total) +
                          " slices, fewer than the requested " + std::to_string(n_slices));
  }
  auto first = static_cast<Eigen::Index>(std::llround(centroid)) - n_slices / 2;
  first = std::clamp<Eigen::Index>(first, 0, n_total - n_slices);
  return {first, n_slices};
}

SlabWindow extract_slab(std::span<const Mask> breast_masks, Eigen::Index n_slices) {
  const auto n_total = static_cast<Eigen::Index>(breast_masks.size());
  double weighted = 0, total = 0;
  for (Eigen::Index i = 0; i < n_total; ++i) {
    const double c = double(count(breast_masks[i]));
    weighted += c * double(i);
    total += c;
  }
  const double centroid = total > 0 ? weighted / total : 0.5 * double(n_total - 1);
  return slab_window(n_total, centroid, n_slices);
}

namespace {
// Corner-aligned source coordinate for output index i.
double source_coord(Eigen::Index i, Eigen::Index in, Eigen::Index out) {
  return out > 1 ? double(i) * double(in - 1) / double(out - 1) : 0.0;
}
}  // namespace

Image resize_bilinear(const Image& image, Eigen::Index out_h, Eigen::Index out_w) {
  if (image.rows() < 2 || image.cols() < 2) {
    throw ValidationError("resize_bilinear: input must be at least 2x2");
  }
  if (out_h < 1 || out_w < 1) throw ValidationError("resize_bilinear: empty output");
  if (out_h == image.rows() && out_w == image.cols()) return image;
  Image out(out_h, out_w);
  for (Eigen::Index y = 0; y < out_h; ++y) {
    const double sy = source_coord(y, image.rows(), out_h);
    const auto y0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(sy), image.rows() - 2);
    const double fy = sy - double(y0);
    for (Eigen::Index x = 0; x < out_w; ++x) {
      const double sx = source_coord(x, image.cols(), out_w);
      const auto x0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(sx), image.cols() - 2);
      const double fx = sx - double(x0);
      const double top = (1 - fx) * image(y0, x0) + fx * image(y0, x0 + 1);
      const double bottom = (1 - fx) * image(y0 + 1, x0) + fx * image(y0 + 1, x0 + 1);
      out(y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

Mask resize_nearest(const Mask& mask, Eigen::Index out_h, Eigen::Index out_w) {
  if (out_h == mask.rows() && out_w == mask.cols()) return mask;
  Mask out(out_h, out_w);
  for (Eigen::Index y = 0; y < out_h; ++y) {
    const auto sy = static_cast<Eigen::Index>(std::lround(source_coord(y, mask.rows(), out_h)));
    for (Eigen::Index x = 0; x < out_w; ++x) {
      const auto sx = static_cast<Eigen::Index>(std::lround(source_coord(x, mask.cols(), out_w)));
      out(y, x) = mask(sy, sx);
    }
  }
  return out;
}

double compute_density(const Mask& breast_mask, const Mask& fgt_mask) {
  if (breast_mask.rows() != fgt_mask.rows() || breast_mask.cols() != fgt_mask.cols()) {
    throw ValidationError("compute_density: mask dimensions differ");
  }
  const Eigen::Index n_breast = count(breast_mask);
  if (n_breast == 0) throw ValidationError("compute_density: empty breast mask");
  if (((fgt_mask != 0) && (breast_mask == 0)).any()) {
    throw ValidationError("compute_density: FGT pixel outside the breast mask");
  }
  return double(count(fgt_mask)) / double(n_breast);
}

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    case SplitTag::all: return "all";
  }
  return "all";
}

SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "val") return SplitTag::val;
  if (s == "test") return SplitTag::test;
  if (s == "all") return SplitTag::all;
  throw ValidationError("unknown split tag '" + s + "'");
}

std::vector<int> Dataset::patient_ids() const {
  std::set<int> ids;
  for (const auto& s : samples) ids.insert(s.patient_id);
  return {ids.begin(), ids.end()};
}

Dataset prepare_dataset(const std::vector<PhantomSlice>& slices, Eigen::Index out_size,
                        Eigen::Index slab_slices) {
  // Group by patient, keeping slice order.
  std::map<int, std::vector<const PhantomSlice*>> by_patient;
  for (const auto& s : slices) by_patient[s.patient_id].push_back(&s);

  Dataset out;
  for (auto& [pid, group] : by_patient) {
    std::sort(group.begin(), group.end(), [](const PhantomSlice* a, const PhantomSlice* b) {
      return a->slice_index < b->slice_index;
    });
    std::vector<Mask> masks;
    masks.reserve(group.size());
    for (const auto* s : group) masks.push_back(s->breast_mask);
    const auto n = std::min<Eigen::Index>(slab_slices, static_cast<Eigen::Index>(group.size()));
    const SlabWindow win = extract_slab(masks, n);
    for (Eigen::Index i = win.first; i < win.first + win.count; ++i) {
      const PhantomSlice& s = *group[static_cast<std::size_t>(i)];
      Sample sample;
      sample.image = resize_bilinear(percentile_normalize(s.image), out_size, out_size);
      sample.density = compute_density(s.breast_mask, s.fgt_mask);
      sample.patient_id = s.patient_id;
      sample.slice_index = s.slice_index;
      sample.breast_mask = resize_nearest(s.breast_mask, out_size, out_size);
      sample.fgt_mask = resize_nearest(s.fgt_mask, out_size, out_size);
      out.samples.push_back(std::move(sample));
    }
  }
  return out;
}

void SplitSpec::validate() const {
  if (!(train > 0 && val > 0 && test > 0)) {
    throw ValidationError("split fractions must be positive");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must sum to 1");
  }
}

std::array<std::size_t, 3> split_counts(std::size_t n_patients, const SplitSpec& spec) {
  spec.validate();
  const std::array<double, 3> fractions{spec.train, spec.val, spec.test};
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * double(n_patients);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - double(counts[i]);
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n_patients; ++i, ++assigned) ++counts[order[i % 3]];
  for (std::size_t c : counts) {
    if (c == 0) {
      throw ValidationError("split_by_patient: " + std::to_string(n_patients) +
                            " patients are too few for a non-empty train/val/test split");
    }
  }
  return counts;
}

Splits split_by_patient(const Dataset& dataset, const SplitSpec& spec) {
  std::vector<int> ids = dataset.patient_ids();
  const auto counts = split_counts(ids.size(), spec);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  std::map<int, SplitTag> assignment;
  std::size_t i = 0;
  for (std::size_t k = 0; k < counts[0]; ++k) assignment[ids[i++]] = SplitTag::train;
  for (std::size_t k = 0; k < counts[1]; ++k) assignment[ids[i++]] = SplitTag::val;
  for (std::size_t k = 0; k < counts[2]; ++k) assignment[ids[i++]] = SplitTag::test;

  Splits out;
  out.train.tag = SplitTag::train;
  out.val.tag = SplitTag::val;
  out.test.tag = SplitTag::test;
  for (const auto& s : dataset.samples) {
    switch (assignment.at(s.patient_id)) {
      case SplitTag::train: out.train.samples.push_back(s); break;
      case SplitTag::val: out.val.samples.push_back(s); break;
      default: out.test.samples.push_back(s); break;
    }
  }
  return out;
}

void write_split_manifest(const std::filesystem::path& path, const Splits& splits) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write split manifest " + path.string());
  os << "patient_id,split_tag\n";
  std::map<int, SplitTag> rows;
  for (const Dataset* d : {&splits.train, &splits.val, &splits.test}) {
    for (int pid : d->patient_ids()) rows[pid] = d->tag;
  }
  for (const auto& [pid, tag] : rows) os << pid << ',' << to_string(tag) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace densiscope
