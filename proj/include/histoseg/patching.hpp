#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/image.hpp"

namespace histoseg {

struct PatchOrigin {
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

struct PatchGrid {
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::size_t patch_size = 256;
  std::size_t margin = 64;
  std::vector<PatchOrigin> origins;  // row-major order

  std::size_t global_size() const { return patch_size + 2 * margin; }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

struct PatchPair {
  RasterImage local;
  RasterImage global_raw;
  PatchOrigin origin;
};

/// Stride-`patch` origins along one axis; the last origin is pulled back to
/// `extent - patch` so the tiles cover the axis without leaving the image.
inline std::vector<std::size_t> axis_origins(std::size_t extent, std::size_t patch) {
  require(patch > 0 && patch <= extent, ErrorKind::InvalidArgument,
          "patch size " + std::to_string(patch) + " does not fit extent " + std::to_string(extent));
  std::vector<std::size_t> out;
  for (std::size_t o = 0; o < extent; o += patch) out.push_back(std::min(o, extent - patch));
  out.back() = extent - patch;
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline PatchGrid plan_patch_grid(std::size_t image_height, std::size_t image_width, std::size_t patch_size,
                                 std::size_t margin) {
  require(patch_size > 0, ErrorKind::InvalidArgument, "patch size must be positive");
  require(patch_size <= image_height && patch_size <= image_width, ErrorKind::InvalidArgument,
          "patch size larger than image");
  PatchGrid grid{image_height, image_width, patch_size, margin, {}};
  const auto rows = axis_origins(image_height, patch_size);
  const auto cols = axis_origins(image_width, patch_size);
  for (auto r : rows)
    for (auto c : cols) grid.origins.push_back({r, c});
  return grid;
}

inline RasterImage crop(const RasterImage& image, std::size_t row, std::size_t col, std::size_t height,
                        std::size_t width) {
  require(row + height <= image.height() && col + width <= image.width(), ErrorKind::OutOfBounds,
          "crop rectangle outside image bounds");
  RasterImage out(height, width, image.channels());
  const std::size_t ch = image.channels();
  for (std::size_t r = 0; r < height; ++r) {
    const double* src = &image.pixels()[((row + r) * image.width() + col) * ch];
    std::copy(src, src + width * ch, &out.pixels()[r * width * ch]);
  }
  return out;
}

inline RasterImage extract_local_patch(const RasterImage& image, PatchOrigin origin, std::size_t patch_size) {
  return crop(image, origin.row, origin.col, patch_size, patch_size);
}

/// The local rectangle grown by `margin` on every side; pixels falling outside
/// the image are zero in every channel.
inline RasterImage extract_global_patch(const RasterImage& image, PatchOrigin origin, std::size_t patch_size,
                                        std::size_t margin) {
  require(origin.row + patch_size <= image.height() && origin.col + patch_size <= image.width(),
          ErrorKind::OutOfBounds, "local patch rectangle outside image bounds");
  const std::size_t size = patch_size + 2 * margin;
  const std::size_t ch = image.channels();
  RasterImage out(size, size, ch, 0.0);
  const auto top = static_cast<std::ptrdiff_t>(origin.row) - static_cast<std::ptrdiff_t>(margin);
  const auto left = static_cast<std::ptrdiff_t>(origin.col) - static_cast<std::ptrdiff_t>(margin);
  for (std::size_t r = 0; r < size; ++r) {
    const std::ptrdiff_t sr = top + static_cast<std::ptrdiff_t>(r);
    if (sr < 0 || sr >= static_cast<std::ptrdiff_t>(image.height())) continue;
    for (std::size_t c = 0; c < size; ++c) {
      const std::ptrdiff_t sc = left + static_cast<std::ptrdiff_t>(c);
      if (sc < 0 || sc >= static_cast<std::ptrdiff_t>(image.width())) continue;
      for (std::size_t k = 0; k < ch; ++k)
        out.at(r, c, k) = image.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc), k);
    }
  }
  return out;
}

inline RasterImage center_crop(const RasterImage& image, std::size_t size) {
  require(size <= image.height() && size <= image.width(), ErrorKind::OutOfBounds, "center crop too large");
  return crop(image, (image.height() - size) / 2, (image.width() - size) / 2, size, size);
}

inline PatchPair extract_pair(const RasterImage& image, PatchOrigin origin, std::size_t patch_size,
                              std::size_t margin) {
  return {extract_local_patch(image, origin, patch_size), extract_global_patch(image, origin, patch_size, margin),
          origin};
}

/// Averages overlapping patch maps. The running mean is evaluated in grid
/// order, so identical overlapping values reproduce exactly.
inline RasterImage stitch_predictions(const PatchGrid& grid, const std::vector<RasterImage>& patch_maps) {
  require(patch_maps.size() == grid.origins.size(), ErrorKind::ShapeMismatch,
          "expected " + std::to_string(grid.origins.size()) + " patch maps, got " +
              std::to_string(patch_maps.size()));
  RasterImage out(grid.image_height, grid.image_width, 1, 0.0);
  std::vector<unsigned> counts(grid.image_height * grid.image_width, 0);
  for (std::size_t k = 0; k < patch_maps.size(); ++k) {
    const RasterImage& m = patch_maps[k];
    require(m.height() == grid.patch_size && m.width() == grid.patch_size && m.channels() == 1,
            ErrorKind::ShapeMismatch, "patch map " + std::to_string(k) + " has the wrong shape");
    validate_probability(m, "patch map " + std::to_string(k));
    const PatchOrigin o = grid.origins[k];
    require(o.row + grid.patch_size <= grid.image_height && o.col + grid.patch_size <= grid.image_width,
            ErrorKind::OutOfBounds, "grid origin outside image");
    for (std::size_t r = 0; r < grid.patch_size; ++r)
      for (std::size_t c = 0; c < grid.patch_size; ++c) {
        const std::size_t idx = (o.row + r) * grid.image_width + o.col + c;
        double& mean = out.pixels()[idx];
        const unsigned n = ++counts[idx];
        mean += (m.at(r, c) - mean) / static_cast<double>(n);
      }
  }
  for (unsigned n : counts) require(n > 0, ErrorKind::InvalidArgument, "grid does not cover the image");
  return out;
}

/// Bilinear resampling with pixel-center alignment and clamped edges.
inline RasterImage resize_bilinear(const RasterImage& image, std::size_t out_height, std::size_t out_width) {
  require(out_height > 0 && out_width > 0, ErrorKind::InvalidArgument, "resize target must be positive");
  require(!image.empty(), ErrorKind::InvalidArgument, "cannot resize an empty image");
  const std::size_t ch = image.channels();
  RasterImage out(out_height, out_width, ch);
  const double sy = static_cast<double>(image.height()) / static_cast<double>(out_height);
  const double sx = static_cast<double>(image.width()) / static_cast<double>(out_width);
  const double max_y = static_cast<double>(image.height() - 1);
  const double max_x = static_cast<double>(image.width() - 1);
  for (std::size_t r = 0; r < out_height; ++r) {
    const double y = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, image.height() - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_width; ++c) {
      const double x = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, image.width() - 1);
      const double fx = x - static_cast<double>(x0);
      for (std::size_t k = 0; k < ch; ++k) {
        const double top = image.at(y0, x0, k) + fx * (image.at(y0, x1, k) - image.at(y0, x0, k));
        const double bot = image.at(y1, x0, k) + fx * (image.at(y1, x1, k) - image.at(y1, x0, k));
        out.at(r, c, k) = top + fy * (bot - top);
      }
    }
  }
  return out;
}

}  // namespace histoseg
