#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/error.hpp"
#include "msrn/tensor.hpp"

namespace msrn {

/// H x W x B cube, bands contiguous per pixel (row-major over row, col).
struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  HsiCube() = default;
  HsiCube(std::size_t h, std::size_t w, std::size_t b) : height(h), width(w), bands(b), values(h * w * b, 0.0) {}

  std::size_t pixels() const noexcept { return height * width; }
  double& at(std::size_t row, std::size_t col, std::size_t band) { return values[(row * width + col) * bands + band]; }
  double at(std::size_t row, std::size_t col, std::size_t band) const {
    return values[(row * width + col) * bands + band];
  }
  std::span<const double> spectrum(std::size_t pixel) const { return {values.data() + pixel * bands, bands}; }

  void validate() const {
    if (height < 1 || width < 1 || bands < 1) throw DataError("cube dimensions must all be >= 1");
    if (values.size() != height * width * bands) throw DataError("cube value count does not match H*W*B");
    for (double v : values) {
      if (!std::isfinite(v)) throw DataError("cube contains a non-finite value");
    }
  }
};

/// H x W class raster; 0 marks unlabeled pixels.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w) : height(h), width(w), labels(h * w, 0) {}

  std::size_t pixels() const noexcept { return height * width; }
  std::uint16_t& at(std::size_t row, std::size_t col) { return labels[row * width + col]; }
  std::uint16_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  std::uint16_t max_label() const {
    std::uint16_t m = 0;
    for (auto l : labels) m = std::max(m, l);
    return m;
  }
};

using Rgb = std::array<std::uint8_t, 3>;

/// Class names and display colours; index 0 of both vectors is class 1.
struct ClassInfo {
  std::vector<std::string> names;
  std::vector<Rgb> palette;

  std::size_t classes() const noexcept { return names.size(); }
};

inline void check_pairing(const HsiCube& cube, const LabelMap& labels) {
  if (cube.height != labels.height || cube.width != labels.width) {
    throw DimensionMismatchError("cube is " + std::to_string(cube.height) + "x" + std::to_string(cube.width) +
                                 " but labels are " + std::to_string(labels.height) + "x" +
                                 std::to_string(labels.width));
  }
}

inline void check_labels(const LabelMap& labels, std::size_t classes) {
  if (labels.max_label() > classes) {
    throw DataError("label " + std::to_string(labels.max_label()) + " exceeds class count " + std::to_string(classes));
  }
}

// ---------------------------------------------------------------------------
// Binary formats
//
// Cube:   "HSIC" u8 version=1 u8 dtype=1(f32 LE) u32 H u32 W u32 B, then
//         H*W*B float32 LE, row-major over (row, col), bands contiguous.
// Labels: "HSIL" u8 version=1 u32 H u32 W, then H*W u16 LE.

namespace io {

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  const std::string& str() const noexcept { return buf_; }

 private:
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    if (data_.size() < magic.size() || std::string_view(data_).substr(0, magic.size()) != magic) {
      throw BadMagicError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    }
    pos_ = magic.size();
  }
  std::string_view take(std::size_t n) {
    if (remaining() < n) {
      throw TruncatedError(what_ + ": truncated at byte " + std::to_string(pos_) + ", needed " + std::to_string(n) +
                           " more");
    }
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  const std::string& what() const noexcept { return what_; }

 private:
  template <typename U>
  U le() {
    const std::string_view b = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<std::uint8_t>(b[i])) << (8 * i);
    return v;
  }
  std::string data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

inline void check_version(std::uint8_t version, const std::string& what) {
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
}

}  // namespace io

inline std::string encode_cube(const HsiCube& cube) {
  cube.validate();
  io::ByteWriter w;
  w.bytes("HSIC");
  w.u8(io::kVersion);
  w.u8(io::kDtypeF32);
  w.u32(static_cast<std::uint32_t>(cube.height));
  w.u32(static_cast<std::uint32_t>(cube.width));
  w.u32(static_cast<std::uint32_t>(cube.bands));
  for (double v : cube.values) w.f32(static_cast<float>(v));
  return w.str();
}

inline HsiCube decode_cube(std::string bytes, const std::string& what = "cube") {
  io::ByteReader r(std::move(bytes), what);
  r.expect_magic("HSIC");
  io::check_version(r.u8(), what);
  if (const auto dtype = r.u8(); dtype != io::kDtypeF32) {
    throw FormatError(what + ": unsupported dtype " + std::to_string(dtype));
  }
  const std::size_t h = r.u32(), w = r.u32(), b = r.u32();
  if (h == 0 || w == 0 || b == 0) throw FormatError(what + ": zero dimension in header");
  const std::size_t count = h * w * b;
  if (r.remaining() < count * 4) {
    throw TruncatedError(what + ": payload holds " + std::to_string(r.remaining() / 4) + " of " +
                         std::to_string(count) + " values");
  }
  HsiCube cube(h, w, b);
  for (std::size_t i = 0; i < count; ++i) cube.values[i] = r.f32();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  cube.validate();
  return cube;
}

inline std::string encode_labels(const LabelMap& labels) {
  io::ByteWriter w;
  w.bytes("HSIL");
  w.u8(io::kVersion);
  w.u32(static_cast<std::uint32_t>(labels.height));
  w.u32(static_cast<std::uint32_t>(labels.width));
  for (auto l : labels.labels) w.u16(l);
  return w.str();
}

inline LabelMap decode_labels(std::string bytes, const std::string& what = "labels") {
  io::ByteReader r(std::move(bytes), what);
  r.expect_magic("HSIL");
  io::check_version(r.u8(), what);
  const std::size_t h = r.u32(), w = r.u32();
  if (h == 0 || w == 0) throw FormatError(what + ": zero dimension in header");
  if (r.remaining() < h * w * 2) {
    throw TruncatedError(what + ": payload holds " + std::to_string(r.remaining() / 2) + " of " +
                         std::to_string(h * w) + " labels");
  }
  LabelMap labels(h, w);
  for (auto& l : labels.labels) l = r.u16();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  return labels;
}

inline HsiCube load_cube(const std::filesystem::path& path) { return decode_cube(io::read_file(path), path.string()); }
inline void save_cube(const std::filesystem::path& path, const HsiCube& cube) { io::write_file(path, encode_cube(cube)); }

inline LabelMap load_labels(const std::filesystem::path& path) {
  return decode_labels(io::read_file(path), path.string());
}
inline void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  io::write_file(path, encode_labels(labels));
}

/// Loads labels and checks them against their cube's dimensions.
inline LabelMap load_labels(const std::filesystem::path& path, const HsiCube& cube) {
  LabelMap labels = load_labels(path);
  check_pairing(cube, labels);
  return labels;
}

inline nlohmann::json class_info_to_json(const ClassInfo& info) {
  nlohmann::json palette = nlohmann::json::array();
  for (const Rgb& c : info.palette) palette.push_back({c[0], c[1], c[2]});
  return {{"class_names", info.names}, {"palette", palette}};
}

inline ClassInfo class_info_from_json(const nlohmann::json& j, const std::string& what = "sidecar") {
  ClassInfo info;
  try {
    info.names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("palette")) {
      for (const auto& c : j.at("palette")) {
        if (c.size() != 3) throw FormatError(what + ": palette entries must be RGB triples");
        Rgb rgb{};
        for (std::size_t i = 0; i < 3; ++i) {
          const int v = c.at(i).get<int>();
          if (v < 0 || v > 255) throw FormatError(what + ": palette value out of 0..255");
          rgb[i] = static_cast<std::uint8_t>(v);
        }
        info.palette.push_back(rgb);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  if (info.names.empty()) throw FormatError(what + ": class_names is empty");
  return info;
}

inline ClassInfo load_class_info(const std::filesystem::path& path) {
  return class_info_from_json(io::read_json(path), path.string());
}
inline void save_class_info(const std::filesystem::path& path, const ClassInfo& info) {
  io::write_json(path, class_info_to_json(info));
}

/// Converts a headerless band-sequential float32 LE array (B planes of H x W)
/// into a cube.
inline HsiCube cube_from_raw_bsq(const std::string& raw, std::size_t h, std::size_t w, std::size_t b) {
  if (h == 0 || w == 0 || b == 0) throw ConfigError("raw dimensions must all be >= 1");
  if (raw.size() > h * w * b * 4) {
    throw DimensionMismatchError("raw array has " + std::to_string(raw.size()) + " bytes, more than the " +
                                 std::to_string(h * w * b * 4) + " implied by the dimensions");
  }
  if (raw.size() != h * w * b * 4) {
    throw TruncatedError("raw array has " + std::to_string(raw.size()) + " bytes, expected " +
                         std::to_string(h * w * b * 4) + " for " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                         std::to_string(b) + " float32");
  }
  io::ByteReader r(raw, "raw cube");
  HsiCube cube(h, w, b);
  for (std::size_t band = 0; band < b; ++band)
    for (std::size_t row = 0; row < h; ++row)
      for (std::size_t col = 0; col < w; ++col) cube.at(row, col, band) = r.f32();
  cube.validate();
  return cube;
}

/// Converts a headerless uint16 LE H x W raster into a label map.
inline LabelMap labels_from_raw(const std::string& raw, std::size_t h, std::size_t w) {
  if (raw.size() > h * w * 2) {
    throw DimensionMismatchError("raw label raster has " + std::to_string(raw.size()) + " bytes, more than the " +
                                 std::to_string(h * w * 2) + " implied by the dimensions");
  }
  if (raw.size() != h * w * 2) {
    throw TruncatedError("raw label raster has " + std::to_string(raw.size()) + " bytes, expected " +
                         std::to_string(h * w * 2));
  }
  io::ByteReader r(raw, "raw labels");
  LabelMap labels(h, w);
  for (auto& l : labels.labels) l = r.u16();
  return labels;
}

// ---------------------------------------------------------------------------
// Standardization

struct BandStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::size_t> constant_bands;  // bands whose std fell back to 1
};

/// Per-band mean and population standard deviation over the given pixels.
/// A band with zero spread gets std 1 and is listed in constant_bands.
inline BandStats fit_band_stats(const HsiCube& cube, std::span<const std::uint32_t> pixels) {
  if (pixels.empty()) throw DataError("cannot fit band statistics on zero pixels");
  const std::size_t b = cube.bands;
  BandStats stats;
  stats.mean.assign(b, 0.0);
  stats.stddev.assign(b, 0.0);
  for (std::uint32_t p : pixels) {
    if (p >= cube.pixels()) throw DataError("pixel index " + std::to_string(p) + " outside the cube");
    const auto s = cube.spectrum(p);
    for (std::size_t j = 0; j < b; ++j) stats.mean[j] += s[j];
  }
  const double n = static_cast<double>(pixels.size());
  for (double& m : stats.mean) m /= n;
  for (std::uint32_t p : pixels) {
    const auto s = cube.spectrum(p);
    for (std::size_t j = 0; j < b; ++j) stats.stddev[j] += (s[j] - stats.mean[j]) * (s[j] - stats.mean[j]);
  }
  for (std::size_t j = 0; j < b; ++j) {
    stats.stddev[j] = std::sqrt(stats.stddev[j] / n);
    if (!(stats.stddev[j] > 0.0)) {
      stats.stddev[j] = 1.0;
      stats.constant_bands.push_back(j);
    }
  }
  return stats;
}

inline HsiCube standardize(const HsiCube& cube, const BandStats& stats) {
  if (stats.mean.size() != cube.bands || stats.stddev.size() != cube.bands) {
    throw DimensionMismatchError("band statistics cover " + std::to_string(stats.mean.size()) + " bands, cube has " +
                                 std::to_string(cube.bands));
  }
  HsiCube out = cube;
  for (std::size_t p = 0; p < cube.pixels(); ++p)
    for (std::size_t j = 0; j < cube.bands; ++j) {
      double& v = out.values[p * cube.bands + j];
      v = (v - stats.mean[j]) / stats.stddev[j];
    }
  return out;
}

inline nlohmann::json band_stats_to_json(const BandStats& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"constant_bands", s.constant_bands}};
}

inline BandStats band_stats_from_json(const nlohmann::json& j) {
  BandStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  if (j.contains("constant_bands")) s.constant_bands = j.at("constant_bands").get<std::vector<std::size_t>>();
  return s;
}

// ---------------------------------------------------------------------------
// Patches

inline void check_patch_size(std::size_t s) {
  if (s == 0 || s % 2 == 0) throw ConfigError("patch size must be odd, got " + std::to_string(s));
}

namespace detail {
inline void copy_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t s, double* out) {
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(s / 2);
  const std::size_t b = cube.bands;
  for (std::size_t i = 0; i < s; ++i) {
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(row) - half + static_cast<std::ptrdiff_t>(i);
    for (std::size_t j = 0; j < s; ++j) {
      const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(col) - half + static_cast<std::ptrdiff_t>(j);
      double* dst = out + (i * s + j) * b;
      if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(cube.height) ||
          c >= static_cast<std::ptrdiff_t>(cube.width)) {
        std::fill(dst, dst + b, 0.0);
      } else {
        const auto src = cube.spectrum(static_cast<std::size_t>(r) * cube.width + static_cast<std::size_t>(c));
        std::copy(src.begin(), src.end(), dst);
      }
    }
  }
}
}  // namespace detail

/// s x s x B window centred on (row, col) as a [s, s, B, 1] tensor;
/// positions outside the image are zero.
inline Tensor extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t s) {
  check_patch_size(s);
  if (row >= cube.height || col >= cube.width) {
    throw DataError("patch centre (" + std::to_string(row) + "," + std::to_string(col) + ") outside the image");
  }
  Tensor patch({s, s, cube.bands, 1});
  detail::copy_patch(cube, row, col, s, patch.ptr());
  return patch;
}

/// Stacks patches for flat pixel indices into [n, s, s, B, 1].
inline Tensor gather_patches(const HsiCube& cube, std::span<const std::uint32_t> pixels, std::size_t s) {
  check_patch_size(s);
  Tensor batch({pixels.size(), s, s, cube.bands, 1});
  const std::size_t per = s * s * cube.bands;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] >= cube.pixels()) throw DataError("pixel index " + std::to_string(pixels[i]) + " outside the cube");
    detail::copy_patch(cube, pixels[i] / cube.width, pixels[i] % cube.width, s, batch.ptr() + i * per);
  }
  return batch;
}

}  // namespace msrn
