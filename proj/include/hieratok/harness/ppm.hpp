#pragma once

// Binary PPM (P6, maxval 255) reading and writing, and the 8-bit <-> [-1, 1]
// pixel mapping x / 127.5 - 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"

namespace hieratok {

struct PpmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major
};

namespace detail {

class PpmHeaderReader {
 public:
  explicit PpmHeaderReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (is_space(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(std::string("ppm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("ppm: expected ") + what, start);
    return v;
  }

  static bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& b_;
};

}  // namespace detail

inline PpmImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: missing P6 magic", 0);
  detail::PpmHeaderReader r(bytes);
  r.pos_ = 2;
  if (r.pos_ < bytes.size() && !detail::PpmHeaderReader::is_space(bytes[r.pos_]) && bytes[r.pos_] != '#')
    throw FormatError("ppm: missing whitespace after magic", r.pos_);
  PpmImage img;
  img.width = r.number("width");
  img.height = r.number("height");
  r.skip_space_and_comments();
  const std::size_t maxval_at = r.pos_;
  const std::size_t maxval = r.number("maxval");
  if (img.width == 0 || img.height == 0) throw FormatError("ppm: zero image dimension", maxval_at);
  if (maxval != 255) throw FormatError("ppm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (r.pos_ >= bytes.size() || !detail::PpmHeaderReader::is_space(bytes[r.pos_]))
    throw FormatError("ppm: expected single whitespace before raster", r.pos_);
  ++r.pos_;
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - r.pos_ < need) {
    throw FormatError("ppm: raster truncated, need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - r.pos_),
                      bytes.size());
  }
  if (bytes.size() - r.pos_ > need) throw FormatError("ppm: trailing bytes after raster", r.pos_ + need);
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_), bytes.end());
  return img;
}

/// Canonical encoding: "P6\n<w> <h>\n255\n" followed by the raster.
inline std::vector<std::uint8_t> encode_ppm(const PpmImage& img) {
  if (img.rgb.size() != img.width * img.height * 3) throw DimensionError("ppm: raster size does not match dimensions");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path, 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path, 0);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path, 0);
}

inline PpmImage load_ppm(const std::string& path) {
  try {
    return decode_ppm(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what(), e.offset());
  }
}

inline void save_ppm(const PpmImage& img, const std::string& path) { write_file_bytes(path, encode_ppm(img)); }

inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline std::uint8_t unit_to_byte(double x) {
  const double v = std::round((x + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

/// Planar [3, H, W] values in [-1, 1].
inline std::vector<float> ppm_to_planar(const PpmImage& img) {
  const std::size_t hw = img.width * img.height;
  std::vector<float> out(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + i] = byte_to_unit(img.rgb[i * 3 + c]);
  return out;
}

/// Inverse of ppm_to_planar with rounding and clamping.
template <typename T>
PpmImage planar_to_ppm(const T* planar, std::size_t height, std::size_t width) {
  PpmImage img;
  img.width = width;
  img.height = height;
  img.rgb.resize(3 * width * height);
  const std::size_t hw = width * height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.rgb[i * 3 + c] = unit_to_byte(static_cast<double>(planar[c * hw + i]));
  return img;
}

}  // namespace hieratok
