#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/image.hpp"

namespace histoseg {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

inline std::uint8_t quantize_channel(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v));
}

// State touched between setjmp and a possible longjmp lives behind a
// reference so nothing with a destructor is skipped on unwind.
struct PngDecodeState {
  std::string err;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0, channels = 0;
  std::size_t row_bytes = 0;
  std::vector<unsigned char> raw;
  std::vector<png_bytep> rows;
};

enum class PngStatus { Ok, Malformed, SixteenBit, NoMemory };

inline PngStatus decode_png(std::FILE* file, PngDecodeState& st) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &st.err, png_error_fn, png_warning_fn);
  if (!png) return PngStatus::NoMemory;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return PngStatus::NoMemory;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return PngStatus::Malformed;
  }
  png_init_io(png, file);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_get_IHDR(png, info, &st.width, &st.height, &st.bit_depth, &st.color_type, nullptr, nullptr, nullptr);
  if (st.bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    return PngStatus::SixteenBit;
  }
  if (st.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (st.color_type == PNG_COLOR_TYPE_GRAY && st.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  st.channels = png_get_channels(png, info);
  st.row_bytes = png_get_rowbytes(png, info);
  st.raw.resize(st.row_bytes * st.height);
  st.rows.resize(st.height);
  for (png_uint_32 r = 0; r < st.height; ++r) st.rows[r] = st.raw.data() + r * st.row_bytes;
  png_read_image(png, st.rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return PngStatus::Ok;
}

struct PngEncodeState {
  std::string err;
  std::vector<png_bytep> rows;
};

inline bool encode_png(std::FILE* file, std::size_t w, std::size_t h, std::size_t ch, PngEncodeState& st) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &st.err, png_error_fn, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, st.rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

/// Decodes an 8-bit grayscale or RGB PNG (alpha is dropped, palettes expanded).
/// Grayscale loads as one channel, everything else as three.
inline RasterImage load_png(const std::filesystem::path& path) {
  std::error_code ec;
  require(std::filesystem::is_regular_file(path, ec), ErrorKind::FileNotFound,
          "no such file: " + path.string());
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  require(file != nullptr, ErrorKind::Io, "cannot open " + path.string());

  unsigned char sig[8] = {};
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    fail(ErrorKind::MalformedPng, "not a PNG file: " + path.string());

  detail::PngDecodeState st;
  switch (detail::decode_png(file.get(), st)) {
    case detail::PngStatus::Ok: break;
    case detail::PngStatus::SixteenBit:
      fail(ErrorKind::UnsupportedBitDepth, "16-bit PNG not supported: " + path.string());
    case detail::PngStatus::Malformed:
      fail(ErrorKind::MalformedPng, "malformed PNG " + path.string() + ": " + st.err);
    case detail::PngStatus::NoMemory:
      fail(ErrorKind::Io, "libpng allocation failed");
  }
  const auto ch = static_cast<std::size_t>(st.channels);
  require(ch == 1 || ch == 3, ErrorKind::MalformedPng, "unsupported PNG channel layout: " + path.string());

  RasterImage img(st.height, st.width, ch);
  auto& px = img.pixels();
  for (std::size_t r = 0; r < st.height; ++r)
    for (std::size_t i = 0; i < st.width * ch; ++i) px[r * st.width * ch + i] = st.raw[r * st.row_bytes + i];
  return img;
}

/// Writes an 8-bit PNG; values are clamped to [0, 255] and rounded.
inline void save_png(const RasterImage& image, const std::filesystem::path& path) {
  require(!image.empty(), ErrorKind::InvalidArgument, "cannot save an empty image");
  detail::FilePtr file(std::fopen(path.c_str(), "wb"));
  require(file != nullptr, ErrorKind::Io, "cannot write " + path.string());

  const std::size_t h = image.height(), w = image.width(), ch = image.channels();
  std::vector<unsigned char> raw(h * w * ch);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = detail::quantize_channel(image.pixels()[i]);

  detail::PngEncodeState st;
  st.rows.resize(h);
  for (std::size_t r = 0; r < h; ++r) st.rows[r] = raw.data() + r * w * ch;
  require(detail::encode_png(file.get(), w, h, ch, st), ErrorKind::Io,
          "failed writing " + path.string() + ": " + st.err);
  require(std::fflush(file.get()) == 0, ErrorKind::Io, "failed flushing " + path.string());
}

}  // namespace histoseg
