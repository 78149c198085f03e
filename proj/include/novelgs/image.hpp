#pragma once

// Float images in [0,1] and 8-bit PNG read/write (libpng).

#include "novelgs/geometry.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

struct Image {
  Resolution resolution;
  std::vector<Real> rgb;  // H*W*3

  Image() = default;
  explicit Image(Resolution res, Real fill = 0.0) : resolution(res), rgb(res.pixels() * 3, fill) {}
  Image(Resolution res, std::vector<Real> values) : resolution(res), rgb(std::move(values)) {
    if (rgb.size() != res.pixels() * 3) throw std::invalid_argument("Image: expected H*W*3 values");
  }
  bool operator==(const Image&) const = default;
};

struct Mask {
  Resolution resolution;
  std::vector<Real> values;  // H*W

  Mask() = default;
  explicit Mask(Resolution res, Real fill = 0.0) : resolution(res), values(res.pixels(), fill) {}
  Mask(Resolution res, std::vector<Real> v) : resolution(res), values(std::move(v)) {
    if (values.size() != res.pixels()) throw std::invalid_argument("Mask: expected H*W values");
  }
  bool operator==(const Mask&) const = default;
};

inline unsigned char to_byte(Real v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

struct PngFile {
  std::FILE* fp = nullptr;
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

inline void write_png(const std::filesystem::path& path, int width, int height, int channels,
                      const std::vector<unsigned char>& pixels) {
  PngFile file{std::fopen(path.string().c_str(), "wb")};
  if (!file.fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: cannot allocate writer");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path.string());
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * width * channels);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Returns 8-bit pixels expanded to `channels` (1 = gray, 3 = RGB).
inline std::vector<unsigned char> read_png(const std::filesystem::path& path, int channels, Resolution& res) {
  PngFile file{std::fopen(path.string().c_str(), "rb")};
  if (!file.fp) throw std::runtime_error("cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: cannot allocate reader");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: failed reading " + path.string());
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  const png_byte color_type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (channels == 3 && (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA))
    png_set_gray_to_rgb(png);
  if (channels == 1 && (color_type & PNG_COLOR_MASK_COLOR)) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  res = {static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info))};
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(res.width) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unexpected PNG layout in " + path.string());
  }
  std::vector<unsigned char> pixels(rowbytes * res.height);
  for (int y = 0; y < res.height; ++y) png_read_row(png, pixels.data() + rowbytes * y, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& img) {
  std::vector<unsigned char> px(img.rgb.size());
  std::transform(img.rgb.begin(), img.rgb.end(), px.begin(), to_byte);
  detail::write_png(path, img.resolution.width, img.resolution.height, 3, px);
}

inline void write_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<unsigned char> px(mask.values.size());
  std::transform(mask.values.begin(), mask.values.end(), px.begin(), to_byte);
  detail::write_png(path, mask.resolution.width, mask.resolution.height, 1, px);
}

inline Image read_png_image(const std::filesystem::path& path) {
  Resolution res;
  const auto px = detail::read_png(path, 3, res);
  Image img(res);
  for (std::size_t i = 0; i < px.size(); ++i) img.rgb[i] = px[i] / 255.0;
  return img;
}

inline Mask read_png_mask(const std::filesystem::path& path) {
  Resolution res;
  const auto px = detail::read_png(path, 1, res);
  Mask m(res);
  for (std::size_t i = 0; i < px.size(); ++i) m.values[i] = px[i] / 255.0;
  return m;
}

// Rounds to the 8-bit grid, matching what a PNG round trip stores.
inline Image quantize(const Image& img) {
  Image out = img;
  for (auto& v : out.rgb) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace novelgs
