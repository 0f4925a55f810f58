#include "densiscope/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "densiscope/errors.hpp"
#include "densiscope/parallel.hpp"
#include "densiscope/preprocess.hpp"

namespace densiscope {
namespace {

enum Stream : std::uint32_t { kPatient = 1, kSlice = 2, kBias = 3 };

std::mt19937_64 make_rng(std::uint64_t seed, std::uint32_t a, std::uint32_t b, std::uint32_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b,
                    tag};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
double uniform(std::mt19937_64& rng, const Range& r) {
  return r.lo == r.hi ? r.lo : uniform(rng, r.lo, r.hi);
}

void check_range(const Range& r, const char* name, double min, double max) {
  if (!(r.lo <= r.hi) || r.lo < min || r.hi > max) {
    throw ValidationError(std::string("phantom params: invalid range for ") + name);
  }
}

struct Blob {
  double u, v;  // centre in breast coordinates
  double sigma;
  double amplitude;
};

struct PatientAnatomy {
  double radius_y, radius_x;  // pixels
  double centre_y;
  double wall_x, wall_slope;
  double density;
  std::vector<Blob> blobs;
  Image texture;  // low-frequency gland texture, coarse grid
};

PatientAnatomy draw_patient(std::uint64_t seed, int patient_id, const PhantomParams& p) {
  auto rng = make_rng(seed, static_cast<std::uint32_t>(patient_id), 0, kPatient);
  PatientAnatomy a;
  a.radius_y = uniform(rng, p.breast_radius_y) * double(p.height);
  a.radius_x = uniform(rng, p.breast_radius_x) * double(p.width);
  a.centre_y = uniform(rng, 0.45, 0.55) * double(p.height);
  a.wall_x = uniform(rng, p.chest_wall_x) * double(p.width);
  a.wall_slope = uniform(rng, p.chest_wall_slope);
  std::gamma_distribution<double> ga(p.density_shape.lo), gb(p.density_shape.hi);
  const double x = ga(rng), y = gb(rng);
  a.density = p.density.lo + (p.density.hi - p.density.lo) * x / (x + y);

  const int n_blobs = static_cast<int>(std::lround(uniform(rng, p.blob_count)));
  std::normal_distribution<double> spread(0.0, 1.0);
  for (int i = 0; i < n_blobs; ++i) {
    Blob b;
    // Glandular tissue sits behind the nipple, roughly a third of the way out
    // from the chest wall.
    b.u = std::clamp(0.38 + 0.22 * spread(rng), 0.05, 0.9);
    b.v = std::clamp(0.30 * spread(rng), -0.8, 0.8);
    b.sigma = uniform(rng, p.blob_scale);
    b.amplitude = uniform(rng, 0.6, 1.0);
    a.blobs.push_back(b);
  }
  a.texture = Image(9, 9);
  for (Eigen::Index i = 0; i < a.texture.size(); ++i) {
    a.texture.data()[i] = static_cast<float>(uniform(rng, -1.0, 1.0));
  }
  return a;
}

}  // namespace

void PhantomParams::validate() const {
  if (height < 16 || width < 16) throw ValidationError("phantom params: image must be >= 16x16");
  if (slices_per_patient < 1) throw ValidationError("phantom params: slices_per_patient < 1");
  check_range(breast_radius_y, "breast_radius_y", 0.0, 0.5);
  check_range(breast_radius_x, "breast_radius_x", 0.0, 1.0);
  check_range(chest_wall_x, "chest_wall_x", 0.0, 0.5);
  check_range(chest_wall_slope, "chest_wall_slope", -1.0, 1.0);
  check_range(density, "density", 0.0, 1.0);
  check_range(blob_count, "blob_count", 1.0, 1000.0);
  check_range(blob_scale, "blob_scale", 1e-3, 10.0);
  if (!(density_shape.lo > 0 && density_shape.hi > 0))
    throw ValidationError("phantom params: density_shape must be positive");
  if (!(slice_density_jitter >= 0)) throw ValidationError("phantom params: negative jitter");
  if (!(fat_intensity > fgt_intensity && fgt_intensity > muscle_intensity &&
        muscle_intensity > air_intensity)) {
    throw ValidationError("phantom params: intensities must satisfy fat > fgt > muscle > air");
  }
  if (!(bias_strength >= 0 && bias_strength < 1)) {
    throw ValidationError("phantom params: bias_strength must lie in [0, 1)");
  }
  if (!(noise_sigma >= 0)) throw ValidationError("phantom params: negative noise_sigma");
}

Image apply_bias_field(const Image& image, std::uint64_t seed, double strength) {
  if (strength < 0) throw ValidationError("apply_bias_field: strength must be >= 0");
  if (strength == 0 || image.size() == 0) return image;
  auto rng = make_rng(seed, 0, 0, kBias);
  Image grid(4, 4);
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    grid.data()[i] = static_cast<float>(uniform(rng, -1.0, 1.0));
  }
  const Image g = resize_bilinear(grid, image.rows(), image.cols());
  return image * (1.0f + static_cast<float>(strength) * g);
}

PhantomSlice generate_slice(std::uint64_t seed, int patient_id, int slice_index,
                            const PhantomParams& p) {
  p.validate();
  const PatientAnatomy a = draw_patient(seed, patient_id, p);
  auto rng = make_rng(seed, static_cast<std::uint32_t>(patient_id),
                      static_cast<std::uint32_t>(slice_index), kSlice);

  // Position inside the slab: the cross-section shrinks away from the centre
  // of the breast.
  const double half = 0.5 * (p.slices_per_patient - 1);
  const double t = p.slices_per_patient > 1 ? (slice_index - half) / p.slices_per_patient : 0.0;
  const double shrink = std::sqrt(std::max(0.05, 1.0 - 1.2 * t * t)) * uniform(rng, 0.97, 1.03);
  const double ry = a.radius_y * shrink;
  const double rx = a.radius_x * shrink;
  const double cy = a.centre_y + uniform(rng, -1.5, 1.5);
  const double shift_u = uniform(rng, -0.04, 0.04);
  const double shift_v = uniform(rng, -0.04, 0.04) + 0.3 * t;

  const Eigen::Index h = p.height, w = p.width;
  PhantomSlice s;
  s.patient_id = patient_id;
  s.slice_index = slice_index;
  s.breast_mask = Mask::Zero(h, w);
  s.fgt_mask = Mask::Zero(h, w);
  Image field = Image::Zero(h, w);
  const Image texture = resize_bilinear(a.texture, h, w);

  auto wall_at = [&](double y) { return a.wall_x + a.wall_slope * (y - a.centre_y); };
  const double wall_c = wall_at(cy);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      if (px < wall_at(py)) continue;
      const double u = (px - wall_c) / rx;
      const double v = (py - cy) / ry;
      if (u * u + v * v > 1.0) continue;
      s.breast_mask(y, x) = 1;
      double f = 0;
      for (const Blob& b : a.blobs) {
        const double du = u - (b.u + shift_u), dv = v - (b.v + shift_v);
        f += b.amplitude * std::exp(-(du * du + dv * dv) / (2 * b.sigma * b.sigma));
      }
      field(y, x) = static_cast<float>(f + p.texture_amplitude * texture(y, x));
    }
  }
  const Eigen::Index n_breast = count(s.breast_mask);
  if (n_breast == 0) {
    throw ValidationError("generate_slice: parameters produced an empty breast mask");
  }

  // Glandular mask: the top-k field values inside the breast, k chosen so the
  // mask ratio matches the slice's target density.
  const double jitter = p.slice_density_jitter;
  const double target = a.density <= 0.0 ? 0.0
                                         : std::clamp(a.density + uniform(rng, -jitter, jitter),
                                                      0.0, p.density.hi);
  const auto k = std::min(static_cast<Eigen::Index>(std::llround(target * double(n_breast))),
                          static_cast<Eigen::Index>(std::floor(p.density.hi * double(n_breast))));
  if (k > 0) {
    std::vector<Eigen::Index> idx;
    idx.reserve(n_breast);
    for (Eigen::Index i = 0; i < h * w; ++i) {
      if (s.breast_mask.data()[i]) idx.push_back(i);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index l, Eigen::Index r) {
      return field.data()[l] > field.data()[r];
    });
    for (Eigen::Index i = 0; i < k; ++i) s.fgt_mask.data()[idx[i]] = 1;
  }
  s.density = double(count(s.fgt_mask)) / double(n_breast);

  // Render tissue classes, then the acquisition effects (image only).
  s.image = Image::Constant(h, w, static_cast<float>(p.air_intensity));
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      if (x + 0.5 < wall_at(y + 0.5)) {
        s.image(y, x) = static_cast<float>(p.muscle_intensity);
      } else if (s.fgt_mask(y, x)) {
        s.image(y, x) = static_cast<float>(p.fgt_intensity);
      } else if (s.breast_mask(y, x)) {
        s.image(y, x) = static_cast<float>(p.fat_intensity);
      }
    }
  }
  const std::uint64_t bias_seed = rng();
  s.image = apply_bias_field(s.image, bias_seed, p.bias_strength);
  if (p.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, p.noise_sigma);
    for (Eigen::Index i = 0; i < s.image.size(); ++i) {
      s.image.data()[i] += static_cast<float>(noise(rng));
    }
  }
  return s;
}

std::vector<PhantomSlice> generate_dataset(std::uint64_t seed, int n_patients,
                                           int slices_per_patient, PhantomParams params) {
  if (n_patients < 1) throw ValidationError("generate_dataset: n_patients must be >= 1");
  params.slices_per_patient = slices_per_patient;
  params.validate();
  const std::size_t total = std::size_t(n_patients) * std::size_t(slices_per_patient);
  std::vector<PhantomSlice> out(total);
  parallel_for(total, [&](std::size_t i) {
    const int patient = static_cast<int>(i / std::size_t(slices_per_patient));
    const int slice = static_cast<int>(i % std::size_t(slices_per_patient));
    out[i] = generate_slice(seed, patient, slice, params);
  });
  return out;
}

}  // namespace densiscope
