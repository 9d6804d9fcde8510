// SPDX-License-Identifier: Apache-2.0
#include "smol/raster.hpp"

#include <png.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

namespace smol {

BinaryMask class_mask(const LabelRaster& labels, int class_id) {
  BinaryMask mask(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.pixels.size(); ++i) {
    mask.pixels[i] = labels.pixels[i] == class_id ? 1 : 0;
  }
  return mask;
}

std::size_t count_foreground(const BinaryMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.pixels) n += v != 0;
  return n;
}

namespace {

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset;
};

void png_error_handler(png_structp, png_const_charp msg) { throw ImageIoError(msg); }
void png_warning_handler(png_structp, png_const_charp) {}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes->size()) throw ImageIoError("truncated PNG stream");
  std::memcpy(data, cursor->bytes->data() + cursor->offset, length);
  cursor->offset += length;
}

std::vector<std::uint8_t> encode(const std::uint8_t* pixels, int height, int width, int channels) {
  if (height <= 0 || width <= 0) throw ImageIoError("cannot encode an empty image");
  std::vector<std::uint8_t> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw ImageIoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  try {
    if (!info) throw ImageIoError("png_create_info_struct failed");
    png_set_write_fn(png, &out, png_write_to_vector, nullptr);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

// Decodes to 8-bit, `want_channels` in {1, 3}.
std::vector<std::uint8_t> decode(const std::vector<std::uint8_t>& bytes, int want_channels, int& height,
                                 int& width) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageIoError("not a PNG stream");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  if (!png) throw ImageIoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  try {
    if (!info) throw ImageIoError("png_create_info_struct failed");
    ReadCursor cursor{&bytes, 0};
    png_set_read_fn(png, &cursor, png_read_from_vector);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color_type = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const bool is_gray = (color_type & PNG_COLOR_MASK_COLOR) == 0;
    if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
    if (want_channels == 1 && !is_gray) throw ImageIoError("expected a single-channel PNG");
    png_read_update_info(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(width) * want_channels) {
      throw ImageIoError("unsupported PNG layout");
    }
    out.resize(rowbytes * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = out.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  return encode(img.pixels.data(), img.height, img.width, 3);
}
std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  return encode(img.pixels.data(), img.height, img.width, 1);
}

RgbImage decode_png_rgb(const std::vector<std::uint8_t>& bytes) {
  RgbImage img;
  img.pixels = decode(bytes, 3, img.height, img.width);
  return img;
}

GrayImage decode_png_gray(const std::vector<std::uint8_t>& bytes) {
  GrayImage img;
  img.pixels = decode(bytes, 1, img.height, img.width);
  return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_png(const std::filesystem::path& path, const RgbImage& img) { write_file(path, encode_png(img)); }
void write_png(const std::filesystem::path& path, const GrayImage& img) { write_file(path, encode_png(img)); }
RgbImage read_png_rgb(const std::filesystem::path& path) { return decode_png_rgb(read_file(path)); }
GrayImage read_png_gray(const std::filesystem::path& path) { return decode_png_gray(read_file(path)); }

namespace {
constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> lookup{};
  lookup.fill(-1);
  for (std::size_t i = 0; i < kAlphabet.size(); ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = int(i);
  // Tolerate a data-URL prefix as sent by browsers.
  if (auto comma = text.find(','); text.rfind("data:", 0) == 0 && comma != std::string_view::npos) {
    text.remove_prefix(comma + 1);
  }
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=' ) break;
    if (ch == '\n' || ch == '\r' || ch == ' ') continue;
    const int v = lookup[static_cast<unsigned char>(ch)];
    if (v < 0) throw std::invalid_argument("invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace smol
