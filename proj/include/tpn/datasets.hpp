#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tpn/error.hpp"
#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

/// Inputs [n x d] with one label per row (labels may be empty when unknown).
struct Dataset {
  Tensor inputs = Tensor(Shape{0, 0});
  std::vector<int> labels;

  std::size_t size() const { return inputs.rank() == 2 ? inputs.shape()[0] : 0; }
  std::size_t dims() const { return inputs.rank() == 2 ? inputs.shape()[1] : 0; }
  bool labeled() const { return !labels.empty(); }
};

/// Labeled source data and unlabeled target data. `target_oracle` holds the
/// true target labels when known; it feeds diagnostics only.
struct DomainPair {
  Dataset source;
  Tensor target = Tensor(Shape{0, 0});
  std::vector<int> target_oracle;
  std::size_t classes = 0;
  std::string generator;
  std::map<std::string, double> parameters;
  std::uint64_t seed = 0;

  std::size_t input_dims() const { return source.dims(); }
};

struct BlobsConfig {
  std::size_t classes = 4;
  std::size_t n_per_class = 200;
  double rotation_deg = 30.0;
  std::array<double, 2> translation = {1.0, 0.0};
  double noise = 0.5;
  double radius = 2.5;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::array<double, 2> rotate_translate(std::array<double, 2> p, double angle_rad, std::array<double, 2> about,
                                              std::array<double, 2> translation) {
  const double c = std::cos(angle_rad), s = std::sin(angle_rad);
  const double x = p[0] - about[0], y = p[1] - about[1];
  return {c * x - s * y + about[0] + translation[0], s * x + c * y + about[1] + translation[1]};
}

}  // namespace detail

/// Gaussian blobs centred on a circle. The target is drawn from the same
/// blobs and pushed through a rotation about the origin followed by a
/// translation. Rows are class-major.
inline DomainPair gen_shifted_blobs(const BlobsConfig& cfg) {
  if (cfg.classes < 2) throw DomainError("gen_shifted_blobs: need at least 2 classes");
  if (!(cfg.noise > 0.0)) throw DomainError("gen_shifted_blobs: noise sigma must be positive");
  if (cfg.n_per_class == 0) throw DomainError("gen_shifted_blobs: n_per_class must be positive");
  Rng source_rng(derive_seed(cfg.seed, 11)), target_rng(derive_seed(cfg.seed, 12));
  const double angle = cfg.rotation_deg * std::numbers::pi / 180.0;
  const std::size_t n = cfg.classes * cfg.n_per_class;

  DomainPair pair;
  pair.classes = cfg.classes;
  pair.generator = "blobs";
  pair.seed = cfg.seed;
  pair.parameters = {{"classes", static_cast<double>(cfg.classes)},
                     {"n_per_class", static_cast<double>(cfg.n_per_class)},
                     {"rotation_deg", cfg.rotation_deg},
                     {"translation_x", cfg.translation[0]},
                     {"translation_y", cfg.translation[1]},
                     {"noise", cfg.noise},
                     {"radius", cfg.radius}};
  pair.source.inputs = Tensor(Shape{n, 2});
  pair.target = Tensor(Shape{n, 2});
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.classes);
    const double cx = cfg.radius * std::cos(theta), cy = cfg.radius * std::sin(theta);
    for (std::size_t k = 0; k < cfg.n_per_class; ++k) {
      const std::size_t row = c * cfg.n_per_class + k;
      pair.source.inputs(row, 0) = source_rng.normal(cx, cfg.noise);
      pair.source.inputs(row, 1) = source_rng.normal(cy, cfg.noise);
      pair.source.labels.push_back(static_cast<int>(c));
      const std::array<double, 2> raw = {target_rng.normal(cx, cfg.noise), target_rng.normal(cy, cfg.noise)};
      const auto moved = detail::rotate_translate(raw, angle, {0.0, 0.0}, cfg.translation);
      pair.target(row, 0) = moved[0];
      pair.target(row, 1) = moved[1];
      pair.target_oracle.push_back(static_cast<int>(c));
    }
  }
  return pair;
}

struct MoonsConfig {
  std::size_t n = 400;  // per domain, split evenly between the two moons
  double rotation_deg = 45.0;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

/// Two interleaving half circles; the target is rotated about the centre of
/// the pair, (0.5, 0.25).
inline DomainPair gen_two_moons_shift(const MoonsConfig& cfg) {
  if (cfg.n == 0) throw DomainError("gen_two_moons_shift: n must be positive");
  if (!(cfg.noise > 0.0)) throw DomainError("gen_two_moons_shift: noise sigma must be positive");
  Rng source_rng(derive_seed(cfg.seed, 21)), target_rng(derive_seed(cfg.seed, 22));
  const double angle = cfg.rotation_deg * std::numbers::pi / 180.0;

  auto draw = [&](Rng& rng, int label) -> std::array<double, 2> {
    const double t = std::numbers::pi * rng.uniform();
    std::array<double, 2> p = label == 0 ? std::array<double, 2>{std::cos(t), std::sin(t)}
                                         : std::array<double, 2>{1.0 - std::cos(t), 0.5 - std::sin(t)};
    p[0] += rng.normal(0.0, cfg.noise);
    p[1] += rng.normal(0.0, cfg.noise);
    return p;
  };

  DomainPair pair;
  pair.classes = 2;
  pair.generator = "moons";
  pair.seed = cfg.seed;
  pair.parameters = {{"n", static_cast<double>(cfg.n)}, {"rotation_deg", cfg.rotation_deg}, {"noise", cfg.noise}};
  pair.source.inputs = Tensor(Shape{cfg.n, 2});
  pair.target = Tensor(Shape{cfg.n, 2});
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const int label = i < (cfg.n + 1) / 2 ? 0 : 1;
    const auto s = draw(source_rng, label);
    pair.source.inputs(i, 0) = s[0];
    pair.source.inputs(i, 1) = s[1];
    pair.source.labels.push_back(label);
    const auto t = detail::rotate_translate(draw(target_rng, label), angle, {0.5, 0.25}, {0.0, 0.0});
    pair.target(i, 0) = t[0];
    pair.target(i, 1) = t[1];
    pair.target_oracle.push_back(label);
  }
  return pair;
}

/// One CSV row per sample: x0..x{d-1},label,domain. Target labels are the
/// oracle labels, or empty when unknown.
inline void write_domain_csv(std::ostream& out, const DomainPair& pair) {
  const std::size_t d = pair.input_dims();
  for (std::size_t j = 0; j < d; ++j) out << 'x' << j << ',';
  out << "label,domain\n";
  out << std::setprecision(17);
  auto rows = [&](const Tensor& x, std::span<const int> labels, const char* tag) {
    for (std::size_t i = 0; i < x.shape()[0]; ++i) {
      for (std::size_t j = 0; j < d; ++j) out << x(i, j) << ',';
      if (i < labels.size()) out << labels[i];
      out << ',' << tag << '\n';
    }
  };
  rows(pair.source.inputs, pair.source.labels, "source");
  rows(pair.target, pair.target_oracle, "target");
}

// ---------------------------------------------------------------------------
// IDX files (MNIST / USPS distributions): big-endian header
//   0x00 0x00 <type 0x08 = unsigned byte> <ndims>, then ndims uint32 extents.

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  auto read_u32 = [&](std::size_t offset) {
    if (offset + 4 > bytes.size()) throw FormatError("idx: truncated header", bytes.size());
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
  };
  const std::uint32_t magic = read_u32(0);
  if ((magic & 0xffffff00u) != 0x00000800u) {
    std::ostringstream msg;
    msg << "idx: bad magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic
        << " (expected unsigned-byte data 0x000008NN)";
    throw FormatError(msg.str(), 0);
  }
  const std::size_t ndims = magic & 0xffu;
  if (ndims == 0) throw FormatError("idx: zero dimensions", 3);
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    arr.dims.push_back(read_u32(4 + 4 * i));
    count *= arr.dims.back();
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header + count) {
    throw FormatError("idx: truncated data, expected " + std::to_string(count) + " bytes after header", bytes.size());
  }
  arr.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                  bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return arr;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxArray& arr) {
  if (arr.dims.empty() || arr.dims.size() > 255) throw ShapeError("idx: need 1..255 dimensions");
  std::size_t count = 1;
  for (auto d : arr.dims) count *= d;
  if (count != arr.data.size()) throw ShapeError("idx: dims do not match data length");
  std::vector<std::uint8_t> out = {0, 0, 0x08, static_cast<std::uint8_t>(arr.dims.size())};
  for (auto d : arr.dims) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(d >> shift));
  }
  out.insert(out.end(), arr.data.begin(), arr.data.end());
  return out;
}

inline IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("idx: cannot open '" + path + "'", 0);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " in '" + path + "'", e.offset());
  }
}

inline void write_idx(const std::string& path, const IdxArray& arr) {
  const auto bytes = serialize_idx(arr);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("idx: cannot write '" + path + "'", 0);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Bilinear resize of one row-major grayscale image, sampling at pixel
/// centres with edge clamping.
inline std::vector<double> resize_bilinear(std::span<const double> img, std::size_t h, std::size_t w, std::size_t out_h,
                                           std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = img[y0 * w + x0] * (1 - wx) + img[y0 * w + x1] * wx;
      const double bottom = img[y1 * w + x0] * (1 - wx) + img[y1 * w + x1] * wx;
      out[y * out_w + x] = top * (1 - wy) + bottom * wy;
    }
  }
  return out;
}

/// Class-stratified subsample: n / C per class, the remainder going to the
/// lowest class indices. Returned indices are sorted.
inline std::vector<std::size_t> stratified_indices(std::span<const int> labels, std::size_t classes, std::size_t n,
                                                   std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  Rng rng(derive_seed(seed, 31));
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t want = n / classes + (c < n % classes ? 1 : 0);
    if (by_class[c].size() < want) {
      throw DomainError("stratified subsample: class " + std::to_string(c) + " has " +
                        std::to_string(by_class[c].size()) + " samples, need " + std::to_string(want));
    }
    for (std::size_t k : rng.sample_indices(by_class[c].size(), want)) out.push_back(by_class[c][k]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct IdxLoadOptions {
  std::size_t subsample = 0;  // 0 keeps everything
  std::size_t classes = 10;
  std::size_t out_height = 28;
  std::size_t out_width = 28;
  std::uint64_t seed = 0;
};

/// Images scaled to [0, 1] and resized (bilinear) to out_height x out_width,
/// one flattened image per row.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const IdxLoadOptions& opt = {}) {
  const IdxArray images = read_idx(images_path);
  const IdxArray labels = read_idx(labels_path);
  if (images.dims.size() != 3) throw FormatError("idx: images file '" + images_path + "' is not 3-dimensional", 3);
  if (labels.dims.size() != 1) throw FormatError("idx: labels file '" + labels_path + "' is not 1-dimensional", 3);
  const std::size_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
  if (labels.dims[0] != n) {
    throw FormatError("idx: " + std::to_string(labels.dims[0]) + " labels for " + std::to_string(n) + " images", 4);
  }
  std::vector<int> all_labels(labels.data.begin(), labels.data.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<std::size_t>(all_labels[i]) >= opt.classes) {
      throw FormatError("idx: label " + std::to_string(all_labels[i]) + " out of range", 8 + i);
    }
  }
  std::vector<std::size_t> keep;
  if (opt.subsample == 0) {
    keep.resize(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = i;
  } else {
    keep = stratified_indices(all_labels, opt.classes, opt.subsample, opt.seed);
  }

  const std::size_t features = opt.out_height * opt.out_width;
  Dataset ds;
  ds.inputs = Tensor(Shape{keep.size(), features});
  std::vector<double> pixels(h * w);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const std::size_t i = keep[r];
    for (std::size_t p = 0; p < h * w; ++p) pixels[p] = images.data[i * h * w + p] / 255.0;
    auto row = ds.inputs.row(r);
    if (h == opt.out_height && w == opt.out_width) {
      std::copy(pixels.begin(), pixels.end(), row.begin());
    } else {
      const auto resized = resize_bilinear(pixels, h, w, opt.out_height, opt.out_width);
      std::copy(resized.begin(), resized.end(), row.begin());
    }
    ds.labels.push_back(all_labels[i]);
  }
  return ds;
}

}  // namespace tpn
