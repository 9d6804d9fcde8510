// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace smol {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Interleaved 8-bit raster, row-major, `Channels` values per pixel.
template <int Channels>
struct Raster8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Raster8() = default;
  Raster8(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w),
        pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * Channels, fill) {}

  static constexpr int channels() { return Channels; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool empty() const { return pixels.empty(); }

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * Channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * Channels + c];
  }

  /// Copies the rectangle [y0, y0+h) x [x0, x0+w); the rectangle must lie inside.
  Raster8 crop(int y0, int x0, int h, int w) const {
    if (y0 < 0 || x0 < 0 || y0 + h > height || x0 + w > width || h <= 0 || w <= 0) {
      throw std::invalid_argument("crop rectangle outside raster");
    }
    Raster8 out(h, w);
    for (int y = 0; y < h; ++y) {
      const auto* src = &pixels[(static_cast<std::size_t>(y0 + y) * width + x0) * Channels];
      std::copy(src, src + static_cast<std::size_t>(w) * Channels,
                &out.pixels[static_cast<std::size_t>(y) * w * Channels]);
    }
    return out;
  }

  friend bool operator==(const Raster8&, const Raster8&) = default;
};

using RgbImage = Raster8<3>;
using GrayImage = Raster8<1>;
/// Per-pixel class ids; 0 is background.
using LabelRaster = Raster8<1>;
/// Values in {0, 1}.
using BinaryMask = Raster8<1>;

inline Rgb pixel(const RgbImage& img, int y, int x) {
  return {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
}
inline void set_pixel(RgbImage& img, int y, int x, Rgb c) {
  img.at(y, x, 0) = c.r;
  img.at(y, x, 1) = c.g;
  img.at(y, x, 2) = c.b;
}

/// Indicator raster of `labels == class_id`.
BinaryMask class_mask(const LabelRaster& labels, int class_id);
std::size_t count_foreground(const BinaryMask& mask);

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_png(const RgbImage& img);
std::vector<std::uint8_t> encode_png(const GrayImage& img);
/// Decodes any 8-bit PNG; RGB output drops alpha, gray input is replicated.
RgbImage decode_png_rgb(const std::vector<std::uint8_t>& bytes);
/// Decodes a single-channel 8-bit PNG. RGB input is rejected.
GrayImage decode_png_gray(const std::vector<std::uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const RgbImage& img);
void write_png(const std::filesystem::path& path, const GrayImage& img);
RgbImage read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws std::invalid_argument on characters outside the standard alphabet.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace smol
