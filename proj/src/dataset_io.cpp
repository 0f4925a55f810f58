#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "densiscope/phantom.hpp"
#include "densiscope/preprocess.hpp"

namespace densiscope {
namespace {

namespace fs = std::filesystem;

constexpr const char* kManifestHeader =
    "patient_id,slice_index,density,height,width,image,breast_mask,fgt_mask";

std::string stem(const PhantomSlice& s) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "p%04d_s%02d", s.patient_id, s.slice_index);
  return buf;
}

void write_pgm(const fs::path& path, const Mask& mask) {
  std::string header = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) +
                       "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (Eigen::Index i = 0; i < mask.size(); ++i) bytes.push_back(mask.data()[i] ? 255 : 0);
  io::write_file(path, bytes.data(), bytes.size());
}

Mask read_pgm(const fs::path& path) {
  const auto bytes = io::read_file(path);
  std::string text(bytes.begin(), bytes.end());
  std::istringstream is(text);
  std::string magic;
  long w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) {
    throw IoError(path.string() + ": not a binary 8-bit PGM");
  }
  const auto offset = static_cast<std::size_t>(is.tellg()) + 1;
  if (bytes.size() != offset + std::size_t(w * h)) throw IoError(path.string() + ": bad size");
  Mask m(h, w);
  for (long i = 0; i < w * h; ++i) m.data()[i] = bytes[offset + std::size_t(i)] ? 1 : 0;
  return m;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

void write_dataset(const fs::path& dir, const std::vector<PhantomSlice>& slices) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  std::ostringstream manifest;
  manifest << kManifestHeader << '\n';
  for (const auto& s : slices) {
    const std::string name = stem(s);
    const std::string image = "images/" + name + ".f32";
    const std::string breast = "masks/" + name + "_breast.pgm";
    const std::string fgt = "masks/" + name + "_fgt.pgm";
    io::write_file(dir / image, s.image.data(), sizeof(float) * std::size_t(s.image.size()));
    write_pgm(dir / breast, s.breast_mask);
    write_pgm(dir / fgt, s.fgt_mask);
    char density[40];
    std::snprintf(density, sizeof(density), "%.17g", s.density);
    manifest << s.patient_id << ',' << s.slice_index << ',' << density << ',' << s.image.rows()
             << ',' << s.image.cols() << ',' << image << ',' << breast << ',' << fgt << '\n';
  }
  io::write_file(dir / "manifest.csv", manifest.str());
}

std::vector<PhantomSlice> read_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.csv";
  std::ifstream is(manifest);
  if (!is) throw IoError("dataset manifest not found: " + manifest.string());
  std::string line;
  std::getline(is, line);
  if (line != kManifestHeader) throw IoError(manifest.string() + ": unexpected header");
  std::vector<PhantomSlice> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 8) throw IoError(manifest.string() + ": malformed row '" + line + "'");
    PhantomSlice s;
    s.patient_id = std::stoi(f[0]);
    s.slice_index = std::stoi(f[1]);
    s.density = std::stod(f[2]);
    const long h = std::stol(f[3]), w = std::stol(f[4]);
    const auto bytes = io::read_file(dir / f[5]);
    if (bytes.size() != sizeof(float) * std::size_t(h * w)) {
      throw IoError((dir / f[5]).string() + ": size does not match " + f[3] + "x" + f[4]);
    }
    s.image = Image(h, w);
    std::memcpy(s.image.data(), bytes.data(), bytes.size());
    s.breast_mask = read_pgm(dir / f[6]);
    s.fgt_mask = read_pgm(dir / f[7]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace densiscope
