#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "histoseg/error.hpp"

namespace histoseg {

/// H x W x C image stored row-major as (row, column, channel).
/// RGB images hold intensities in [0, 255]; single-channel images hold either
/// grayscale intensities or probabilities in [0, 1].
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels), pixels_(height * width * channels, fill) {
    require(channels == 1 || channels == 3, ErrorKind::InvalidArgument, "image must have 1 or 3 channels");
  }

  RasterImage(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> pixels)
      : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
    require(channels == 1 || channels == 3, ErrorKind::InvalidArgument, "image must have 1 or 3 channels");
    require(pixels_.size() == height * width * channels, ErrorKind::ShapeMismatch,
            "pixel buffer does not match image dimensions");
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t pixel_count() const { return height_ * width_; }
  bool empty() const { return pixels_.empty(); }

  double& at(std::size_t row, std::size_t col, std::size_t ch = 0) {
    return pixels_[(row * width_ + col) * channels_ + ch];
  }
  double at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
    return pixels_[(row * width_ + col) * channels_ + ch];
  }

  std::vector<double>& pixels() { return pixels_; }
  const std::vector<double>& pixels() const { return pixels_; }

  bool same_dims(const RasterImage& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> pixels_;
};

inline void validate_rgb(const RasterImage& img, const std::string& what = "image") {
  require(img.channels() == 3, ErrorKind::InvalidArgument, what + " must be RGB");
  for (double v : img.pixels())
    require(std::isfinite(v) && v >= 0.0 && v <= 255.0, ErrorKind::InvalidArgument,
            what + " has intensities outside [0, 255]");
}

inline void validate_probability(const RasterImage& img, const std::string& what = "probability map") {
  require(img.channels() == 1, ErrorKind::InvalidArgument, what + " must be single-channel");
  for (double v : img.pixels())
    require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorKind::InvalidArgument,
            what + " has values outside [0, 1]");
}

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width, bool fill = false)
      : height_(height), width_(width), bits_(height * width, fill ? 1 : 0) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return bits_.size(); }

  bool at(std::size_t row, std::size_t col) const { return bits_[row * width_ + col] != 0; }
  void set(std::size_t row, std::size_t col, bool v) { bits_[row * width_ + col] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  bool same_dims(const BinaryMask& o) const { return height_ == o.height_ && width_ == o.width_; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Annotation raster to mask: a pixel is foreground iff its first channel is > 0.
inline BinaryMask mask_from_image(const RasterImage& image) {
  BinaryMask mask(image.height(), image.width());
  for (std::size_t r = 0; r < image.height(); ++r)
    for (std::size_t c = 0; c < image.width(); ++c) mask.set(r, c, image.at(r, c, 0) > 0.0);
  return mask;
}

/// Mask as a single-channel {0, 1} raster.
inline RasterImage mask_to_image(const BinaryMask& mask, double on_value = 1.0) {
  RasterImage img(mask.height(), mask.width(), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels()[i] = mask[i] ? on_value : 0.0;
  return img;
}

inline BinaryMask crop_mask(const BinaryMask& mask, std::size_t row, std::size_t col, std::size_t height,
                            std::size_t width) {
  require(row + height <= mask.height() && col + width <= mask.width(), ErrorKind::OutOfBounds,
          "mask crop outside mask bounds");
  BinaryMask out(height, width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) out.set(r, c, mask.at(row + r, col + c));
  return out;
}

}  // namespace histoseg
